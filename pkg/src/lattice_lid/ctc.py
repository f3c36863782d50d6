"""CTC and non-peaky CTC losses, decoders, alignment helpers and oracles.

All losses take log-domain frame scores. The non-peaky variant divides every
frame score by a power of the utterance's frame-averaged posterior (the
"softmax prior"), which in log space is a per-token shift applied before the
ordinary CTC forward pass.
"""

import csv
import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from ._kernels import ctc_batch

BLANK = 0
LANG_A = "A"
LANG_B = "B"
SPECIAL = "special"

PRIOR_FLOOR = 1e-12


class InfeasibleAlignment(ValueError):
    """No length-L path collapses to the target."""


class PriorUnderflow(FloatingPointError):
    """A prior component needed by a positive alpha is zero."""


@dataclass(frozen=True)
class Vocabulary:
    tokens: tuple
    langs: tuple

    OTHER = 1
    IND_A = 2
    IND_B = 3

    def __post_init__(self):
        if self.tokens[0] != "<blank>":
            raise ValueError("<blank> must be token 0")
        if len(self.tokens) != len(self.langs):
            raise ValueError("one language tag per token is required")

    @classmethod
    def code_switch(cls, n_a=20, n_b=20):
        tokens = ["<blank>", "<other>", "<A>", "<B>"]
        langs = [SPECIAL] * 4
        tokens += [f"A{i:02d}" for i in range(n_a)]
        langs += [LANG_A] * n_a
        tokens += [f"B{i:02d}" for i in range(n_b)]
        langs += [LANG_B] * n_b
        return cls(tuple(tokens), tuple(langs))

    def __len__(self):
        return len(self.tokens)

    def index(self, name):
        return self.tokens.index(name)

    def lang_of(self, idx):
        return self.langs[idx]

    def indicator(self, lang):
        return self.IND_A if lang == LANG_A else self.IND_B

    def language_tokens(self, lang):
        return [i for i, tag in enumerate(self.langs) if tag == lang]

    @property
    def lid_tokens(self):
        """Global indices of the reduced LID vocabulary {<blank>, <A>, <B>}."""
        return (BLANK, self.IND_A, self.IND_B)

    def to_lid(self, target):
        """Map indicator tokens to LID sub-vocabulary indices (1 = <A>, 2 = <B>)."""
        lut = {self.IND_A: 1, self.IND_B: 2}
        return [lut[t] for t in target]


@dataclass
class NpcConfig:
    alpha: float = 0.0
    backprop_through_prior: bool = False
    prior_floor: float = PRIOR_FLOOR
    overrides: dict = field(default_factory=dict)

    def __post_init__(self):
        if not math.isfinite(self.alpha) or self.alpha < 0:
            raise ValueError(f"alpha must be finite and >= 0, got {self.alpha}")

    def alpha_for(self, head):
        return float(self.overrides.get(head, self.alpha))


# -- alignment rules ---------------------------------------------------

def collapse(path, blank=BLANK):
    """Merge adjacent repeats, then drop blanks."""
    out = []
    prev = None
    for tok in path:
        tok = int(tok)
        if tok != prev and tok != blank:
            out.append(tok)
        prev = tok
    return out


def min_frames(target):
    """Shortest path length able to emit ``target`` (repeats need a blank between)."""
    repeats = sum(1 for a, b in zip(target, target[1:]) if a == b)
    return len(target) + repeats


def _check_feasible(lengths, targets):
    for i, (T, y) in enumerate(zip(lengths, targets)):
        if T < 1:
            raise InfeasibleAlignment(f"utterance {i} has no frames")
        need = min_frames(y)
        if T < need:
            raise InfeasibleAlignment(f"utterance {i}: {T} frames cannot emit {len(y)} tokens (needs {need})")


# -- losses ------------------------------------------------------------

def ctc_loss_batch(scores, lengths, targets):
    """Per-utterance CTC negative log-likelihood over (B, T, V) log scores.

    Returns a (B,) tensor. Gradients flow back into ``scores``; frames past
    each utterance's length contribute nothing.
    """
    scores = nx._as_tensor(scores)
    lengths = np.asarray(lengths, dtype=np.int64)
    targets = [list(map(int, y)) for y in targets]
    _check_feasible(lengths, targets)
    nll, grad = ctc_batch(scores.data, lengths, targets)

    def backward(g):
        return (grad * g[:, None, None],)

    return nx._node(nll, (scores,), backward, "ctc")


def ctc_loss(log_post, y):
    """-log P(y|X) for one utterance given (L, V) log posteriors."""
    log_post = nx._as_tensor(log_post)
    batched = nx.reshape(log_post, (1,) + log_post.shape)
    return nx.reshape(ctc_loss_batch(batched, [log_post.shape[0]], [y]), ())


def softmax_prior(post, lengths=None):
    """Frame-averaged posterior: the mean of the probability rows.

    ``post`` is (L, V) probabilities, or (B, T, V) with ``lengths`` giving the
    valid frame count of each row. Accepts arrays or tensors.
    """
    if isinstance(post, nx.Tensor):
        return _prior_tensor(post, lengths)
    post = np.asarray(post, dtype=np.float64)
    if post.ndim == 2:
        if post.shape[0] == 0:
            raise ValueError("empty posteriorgram")
        return post.mean(axis=0)
    mask = _frame_mask(post.shape[1], lengths)
    return (post * mask[:, :, None]).sum(axis=1) / np.asarray(lengths, dtype=np.float64)[:, None]


def _frame_mask(T, lengths):
    return np.arange(T)[None, :] < np.asarray(lengths)[:, None]


def _prior_tensor(post, lengths):
    if post.ndim == 2:
        if post.shape[0] == 0:
            raise ValueError("empty posteriorgram")
        return nx.tmean(post, axis=0)
    mask = _frame_mask(post.shape[1], lengths).astype(np.float64)
    inv_len = 1.0 / np.asarray(lengths, dtype=np.float64)
    return nx.tsum(post * mask[:, :, None], axis=1) * inv_len[:, None]


def adjusted_scores(log_post, prior, alpha):
    """log_post[t, v] - alpha * log prior[v]. Works on arrays or tensors.

    ``prior`` broadcasts against the vocabulary axis: (V,) for one utterance,
    (B, 1, V) for a batch.
    """
    if alpha == 0:
        return log_post
    prior_data = prior.data if isinstance(prior, nx.Tensor) else np.asarray(prior)
    if np.any(prior_data <= 0):
        raise PriorUnderflow("prior has a zero component while alpha > 0")
    if isinstance(log_post, nx.Tensor) or isinstance(prior, nx.Tensor):
        return nx.add(log_post, nx.mul(nx.log(nx._as_tensor(prior)), -alpha))
    return np.asarray(log_post) - alpha * np.log(prior_data)


def npc_loss_batch(log_post, lengths, targets, cfg, alpha=None):
    """Non-peaky CTC over (B, T, V) log posteriors; returns a (B,) tensor.

    The prior is a constant in backward unless ``cfg.backprop_through_prior``.
    Values may be negative since adjusted scores are not normalized.
    """
    alpha = cfg.alpha if alpha is None else alpha
    log_post = nx._as_tensor(log_post)
    if alpha == 0:
        return ctc_loss_batch(log_post, lengths, targets)
    lengths = np.asarray(lengths)
    if cfg.backprop_through_prior:
        prior = _prior_tensor(nx.exp(log_post), lengths)
        if cfg.prior_floor > 0:
            prior = nx.maximum(prior, cfg.prior_floor)
    else:
        prior = softmax_prior(np.exp(log_post.data), lengths)
        if cfg.prior_floor > 0:
            prior = np.maximum(prior, cfg.prior_floor)
        prior = nx.Tensor(prior)
    prior = nx.reshape(prior, (prior.shape[0], 1, prior.shape[1]))
    return ctc_loss_batch(adjusted_scores(log_post, prior, alpha), lengths, targets)


def npc_loss(log_post, y, cfg):
    log_post = nx._as_tensor(log_post)
    batched = nx.reshape(log_post, (1,) + log_post.shape)
    return nx.reshape(npc_loss_batch(batched, [log_post.shape[0]], [y], cfg), ())


# -- oracles -----------------------------------------------------------

_MAX_BRUTE_L = 8
_MAX_BRUTE_V = 4


def _enumerate_paths(L, V, y):
    if L > _MAX_BRUTE_L or V > _MAX_BRUTE_V:
        raise ValueError(f"brute force limited to L <= {_MAX_BRUTE_L}, |V| <= {_MAX_BRUTE_V}")
    y = [int(t) for t in y]
    for path in itertools.product(range(V), repeat=L):
        if collapse(path) == y:
            yield path


def brute_force_ctc(log_post, y):
    """-log of the summed path probability, by enumerating all |V|^L paths."""
    lp = np.asarray(log_post.data if isinstance(log_post, nx.Tensor) else log_post, dtype=np.float64)
    L, V = lp.shape
    terms = [lp[np.arange(L), list(path)].sum() for path in _enumerate_paths(L, V, y)]
    if not terms:
        raise InfeasibleAlignment("no path collapses to the target")
    return -float(np.logaddexp.reduce(terms))


def brute_force_npc(log_post, y, alpha):
    """Non-peaky loss by literal per-path products of P(a_t|X) / prior^alpha."""
    lp = np.asarray(log_post, dtype=np.float64)
    L, V = lp.shape
    post = np.exp(lp)
    prior = post.mean(axis=0)
    total = 0.0
    found = False
    for path in _enumerate_paths(L, V, y):
        found = True
        prod = 1.0
        for t, tok in enumerate(path):
            prod *= post[t, tok] / prior[tok] ** alpha
        total += prod
    if not found:
        raise InfeasibleAlignment("no path collapses to the target")
    return -math.log(total)


# -- decoding ----------------------------------------------------------

def best_path_align(post):
    """Per-frame argmax; ties go to the lowest index, so blank wins ties."""
    post = np.asarray(post)
    if post.shape[0] == 0:
        return []
    return [int(i) for i in np.argmax(post, axis=-1)]


def greedy_decode(post):
    return collapse(best_path_align(post))


def _lse(a, b):
    if a == -math.inf:
        return b
    if b == -math.inf:
        return a
    m = max(a, b)
    return m + math.log(math.exp(a - m) + math.exp(b - m))


def prefix_beam_decode(log_post, width=10, blank=BLANK, return_score=False):
    """CTC prefix beam search over (L, V) log posteriors.

    Tracks, per prefix, the log probability of paths ending in blank and in
    a non-blank. Returns the best collapsed sequence (and its log score).
    """
    if width < 1:
        raise ValueError("beam width must be >= 1")
    lp = np.asarray(log_post, dtype=np.float64)
    V = lp.shape[1]
    neg = -math.inf
    beams = {(): (0.0, neg)}
    for t in range(lp.shape[0]):
        row = lp[t].tolist()
        nxt = {}
        for prefix, (pb, pnb) in beams.items():
            total = _lse(pb, pnb)
            b, nb = nxt.get(prefix, (neg, neg))
            nxt[prefix] = (_lse(b, total + row[blank]), nb)
            last = prefix[-1] if prefix else None
            for c in range(V):
                if c == blank:
                    continue
                p = row[c]
                new = prefix + (c,)
                b2, nb2 = nxt.get(new, (neg, neg))
                if c == last:
                    nxt[new] = (b2, _lse(nb2, pb + p))
                    b, nb = nxt[prefix]
                    nxt[prefix] = (b, _lse(nb, pnb + p))
                else:
                    nxt[new] = (b2, _lse(nb2, total + p))
        ranked = sorted(nxt.items(), key=lambda kv: (-_lse(*kv[1]), kv[0]))
        beams = dict(ranked[:width])
    best, (pb, pnb) = min(beams.items(), key=lambda kv: (-_lse(*kv[1]), kv[0]))
    if return_score:
        return list(best), _lse(pb, pnb)
    return list(best)


# -- posteriorgram CSV -------------------------------------------------

def write_posteriorgram_csv(post, token_names, path):
    post = np.asarray(post, dtype=np.float64)
    if post.shape[1] != len(token_names):
        raise ValueError(f"{post.shape[1]} columns but {len(token_names)} token names")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["frame", *token_names])
        for t, row in enumerate(post):
            writer.writerow([t, *(f"{p:.6f}" for p in row)])


def read_posteriorgram_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    names = rows[0][1:]
    post = np.array([[float(x) for x in r[1:]] for r in rows[1:]], dtype=np.float64)
    return post.reshape(-1, len(names)), names
