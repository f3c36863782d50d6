"""Synthetic two-language code-switching corpus with gold frame alignments.

Every token owns a prototype vector; an utterance is a Markov chain over
languages, each token emitting a random number of noisy copies of its
prototype. A fraction of cross-language token pairs share one prototype,
standing in for cross-lingual homophones that only context can separate.
"""

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .ctc import LANG_A, LANG_B, Vocabulary

PER_TOKEN = "per_token"
RUN_COLLAPSED = "run_collapsed"
LID_MODES = (PER_TOKEN, RUN_COLLAPSED)

FORMAT_NAME = "lattice-lid-corpus"
FORMAT_VERSION = 1


class CorpusFormatError(ValueError):
    pass


@dataclass
class CorpusSpec:
    vocab_a: int = 20
    vocab_b: int = 20
    feature_dim: int = 16
    min_duration: int = 2
    max_duration: int = 5
    noise_std: float = 0.3
    switch_prob: float = 0.3
    min_tokens: int = 8
    max_tokens: int = 20
    homophone_frac: float = 0.25
    seed: int = 0

    def __post_init__(self):
        if self.vocab_a < 1 or self.vocab_b < 1:
            raise ValueError("each language needs at least one token")
        if not 1 <= self.min_duration <= self.max_duration:
            raise ValueError("token duration range is empty")
        if not 1 <= self.min_tokens <= self.max_tokens:
            raise ValueError("utterance length range is empty")
        if not 0.0 <= self.homophone_frac <= 1.0:
            raise ValueError("homophone_frac must lie in [0, 1]")
        if not 0.0 <= self.switch_prob <= 1.0:
            raise ValueError("switch_prob must lie in [0, 1]")

    @property
    def vocab(self):
        return Vocabulary.code_switch(self.vocab_a, self.vocab_b)


@dataclass
class Utterance:
    id: str
    features: np.ndarray
    tokens: list
    langs: list
    frame_langs: list
    spans: list = field(default_factory=list)

    @property
    def n_frames(self):
        return int(self.features.shape[0])

    def __eq__(self, other):
        if not isinstance(other, Utterance):
            return NotImplemented
        return (
            self.id == other.id
            and self.features.shape == other.features.shape
            and np.array_equal(self.features, other.features)
            and list(self.tokens) == list(other.tokens)
            and list(self.langs) == list(other.langs)
            and list(self.frame_langs) == list(other.frame_langs)
            and [tuple(s) for s in self.spans] == [tuple(s) for s in other.spans]
        )


def make_prototypes(spec, rng):
    """(|V|, D) prototype table; rows of special tokens stay zero."""
    vocab = spec.vocab
    protos = np.zeros((len(vocab), spec.feature_dim))
    a_ids = vocab.language_tokens(LANG_A)
    b_ids = vocab.language_tokens(LANG_B)
    protos[a_ids] = rng.standard_normal((len(a_ids), spec.feature_dim))
    protos[b_ids] = rng.standard_normal((len(b_ids), spec.feature_dim))
    n_pairs = int(round(spec.homophone_frac * min(len(a_ids), len(b_ids))))
    if n_pairs:
        pick_a = rng.choice(a_ids, size=n_pairs, replace=False)
        pick_b = rng.choice(b_ids, size=n_pairs, replace=False)
        protos[pick_b] = protos[pick_a]
    return protos


def homophone_pairs(protos, vocab):
    a_ids = vocab.language_tokens(LANG_A)
    b_ids = vocab.language_tokens(LANG_B)
    return [(a, b) for a in a_ids for b in b_ids if np.array_equal(protos[a], protos[b])]


def generate_corpus(spec, n_utts, prefix="utt"):
    if n_utts < 1:
        raise ValueError("n_utts must be >= 1")
    rng = np.random.default_rng(spec.seed)
    vocab = spec.vocab
    protos = make_prototypes(spec, rng)
    pools = {LANG_A: vocab.language_tokens(LANG_A), LANG_B: vocab.language_tokens(LANG_B)}
    utts = []
    for n in range(n_utts):
        n_tok = int(rng.integers(spec.min_tokens, spec.max_tokens + 1))
        lang = LANG_A if rng.random() < 0.5 else LANG_B
        tokens, langs, frames, frame_langs, spans = [], [], [], [], []
        start = 0
        for i in range(n_tok):
            if i and rng.random() < spec.switch_prob:
                lang = LANG_B if lang == LANG_A else LANG_A
            tok = int(rng.choice(pools[lang]))
            dur = int(rng.integers(spec.min_duration, spec.max_duration + 1))
            frames.append(protos[tok] + spec.noise_std * rng.standard_normal((dur, spec.feature_dim)))
            tokens.append(tok)
            langs.append(lang)
            frame_langs.extend([lang] * dur)
            spans.append((start, start + dur))
            start += dur
        utts.append(Utterance(f"{prefix}{n:05d}", np.concatenate(frames), tokens, langs, frame_langs, spans))
    return utts


# -- targets -----------------------------------------------------------

def build_mixed_target(u):
    return list(u.tokens)


def build_lid_target(u, mode=PER_TOKEN):
    """Language-indicator target: one per token, or one per same-language run."""
    if mode == PER_TOKEN:
        langs = list(u.langs)
    elif mode == RUN_COLLAPSED:
        langs = [l for i, l in enumerate(u.langs) if i == 0 or l != u.langs[i - 1]]
    else:
        raise ValueError(f"unknown LID target mode {mode!r}")
    return [Vocabulary.IND_A if l == LANG_A else Vocabulary.IND_B for l in langs]


def build_lat_target(u, lang, per_token_mask=False):
    """Tokens of ``lang`` kept; foreign runs become one <other> (or one per token)."""
    out = []
    for tok, tag in zip(u.tokens, u.langs):
        if tag == lang:
            out.append(tok)
        elif per_token_mask or not out or out[-1] != Vocabulary.OTHER:
            out.append(Vocabulary.OTHER)
    return out


def language_runs(langs):
    return sum(1 for i, l in enumerate(langs) if i == 0 or l != langs[i - 1])


# -- JSON Lines IO -----------------------------------------------------

def _utt_record(u):
    return {
        "id": u.id,
        "features": u.features.tolist(),
        "tokens": [int(t) for t in u.tokens],
        "langs": list(u.langs),
        "frame_langs": list(u.frame_langs),
        "spans": [list(s) for s in u.spans],
    }


def save_corpus(utts, path, spec=None):
    """Header line, then one JSON object per utterance."""
    dim = utts[0].features.shape[1] if utts else (spec.feature_dim if spec else 0)
    header = {"format": FORMAT_NAME, "version": FORMAT_VERSION, "feature_dim": dim, "n_utts": len(utts)}
    if spec is not None:
        header["spec"] = asdict(spec)
    with open(path, "w") as fh:
        fh.write(json.dumps(header) + "\n")
        for u in utts:
            fh.write(json.dumps(_utt_record(u)) + "\n")


def load_corpus(path, with_header=False):
    utts = []
    with open(path) as fh:
        first = fh.readline()
        try:
            header = json.loads(first)
        except json.JSONDecodeError as exc:
            raise CorpusFormatError(f"{path}:1: malformed header ({exc.msg})") from None
        if header.get("format") != FORMAT_NAME:
            raise CorpusFormatError(f"{path}:1: not a {FORMAT_NAME} file")
        dim = header["feature_dim"]
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                feats = np.array(rec["features"], dtype=np.float64)
                u = Utterance(rec["id"], feats, rec["tokens"], rec["langs"], rec["frame_langs"],
                              [tuple(s) for s in rec["spans"]])
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise CorpusFormatError(f"{path}:{lineno}: malformed utterance record ({exc})") from None
            if feats.ndim != 2 or feats.shape[1] != dim:
                raise CorpusFormatError(
                    f"{path}:{lineno}: feature shape {feats.shape} does not match header dim {dim}")
            utts.append(u)
    if "n_utts" in header and header["n_utts"] != len(utts):
        raise CorpusFormatError(f"{path}: header promises {header['n_utts']} utterances, found {len(utts)}")
    if with_header:
        return utts, header
    return utts
