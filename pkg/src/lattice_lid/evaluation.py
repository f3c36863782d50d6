"""Error rates, peakiness and boundary timing, posteriorgram export, ablations."""

import csv
import json
import os
import statistics
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from ._kernels import levenshtein_table
from .ctc import BLANK, LANG_A, LANG_B, Vocabulary, greedy_decode, prefix_beam_decode, write_posteriorgram_csv
from .model import make_batch

UNKNOWN = "unk"


# -- edit distance and MER ---------------------------------------------

def _blank_counts():
    return {"sub": 0, "ins": 0, "del": 0}


@dataclass
class EditResult:
    distance: int
    counts: dict
    ops: list = field(default_factory=list)


def edit_distance(hyp, ref, lang_of=None):
    """Levenshtein distance with errors attributed per language.

    Substitutions and deletions are charged to the reference token's
    language, insertions to the hypothesis token's language. Backtrace
    prefers match/substitution, then deletion, then insertion.
    """
    lang_of = lang_of or Vocabulary.code_switch().lang_of
    hyp = [int(t) for t in hyp]
    ref = [int(t) for t in ref]
    table = levenshtein_table(hyp, ref)
    counts = {}
    ops = []
    i, j = len(ref), len(hyp)
    while i > 0 or j > 0:
        if i > 0 and j > 0:
            cost = 0 if ref[i - 1] == hyp[j - 1] else 1
            if table[i, j] == table[i - 1, j - 1] + cost:
                if cost:
                    counts.setdefault(lang_of(ref[i - 1]), _blank_counts())["sub"] += 1
                    ops.append(("sub", ref[i - 1], hyp[j - 1]))
                else:
                    ops.append(("ok", ref[i - 1], hyp[j - 1]))
                i, j = i - 1, j - 1
                continue
        if i > 0 and table[i, j] == table[i - 1, j] + 1:
            counts.setdefault(lang_of(ref[i - 1]), _blank_counts())["del"] += 1
            ops.append(("del", ref[i - 1], None))
            i -= 1
        else:
            counts.setdefault(lang_of(hyp[j - 1]), _blank_counts())["ins"] += 1
            ops.append(("ins", None, hyp[j - 1]))
            j -= 1
    ops.reverse()
    return EditResult(int(table[len(ref), len(hyp)]), counts, ops)


@dataclass
class MerReport:
    mer: float
    errors: dict
    ref_tokens: dict
    n_utts: int
    total_errors: int = 0
    total_ref: int = 0

    def rate(self, lang):
        """Per-language error rate (CER-like for A, WER-like for B)."""
        n = self.ref_tokens.get(lang, 0)
        e = sum(self.errors.get(lang, _blank_counts()).values())
        return e / n if n else 0.0

    def to_dict(self):
        d = asdict(self)
        d["rate_a"] = self.rate(LANG_A)
        d["rate_b"] = self.rate(LANG_B)
        return d


def mer(hyps, refs, lang_of=None):
    """Pooled mixed error rate: all errors over all reference tokens."""
    if len(hyps) != len(refs):
        raise ValueError(f"{len(hyps)} hypotheses for {len(refs)} references")
    lang_of = lang_of or Vocabulary.code_switch().lang_of
    errors, ref_tokens = {}, {}
    total_err = total_ref = 0
    for hyp, ref in zip(hyps, refs):
        res = edit_distance(hyp, ref, lang_of)
        total_err += res.distance
        total_ref += len(ref)
        for lang, c in res.counts.items():
            acc = errors.setdefault(lang, _blank_counts())
            for k, v in c.items():
                acc[k] += v
        for tok in ref:
            lang = lang_of(int(tok))
            ref_tokens[lang] = ref_tokens.get(lang, 0) + 1
    rate = total_err / max(total_ref, 1)
    return MerReport(rate, errors, ref_tokens, len(refs), total_err, total_ref)


# -- peakiness ---------------------------------------------------------

@dataclass
class PeakinessReport:
    blank_dominance: float
    mean_max: float
    tau: float
    n_frames: int


def peakiness(post, tau=0.9, blank=BLANK):
    """Share of frames whose blank posterior exceeds ``tau``, and the mean max posterior.

    ``post`` may be one (L, V) array or a list of them (frames pooled).
    """
    rows = np.concatenate([np.asarray(p) for p in post]) if isinstance(post, (list, tuple)) else np.asarray(post)
    if rows.shape[0] == 0:
        return PeakinessReport(0.0, 0.0, tau, 0)
    return PeakinessReport(
        float(np.mean(rows[:, blank] > tau)),
        float(np.mean(rows.max(axis=1))),
        tau,
        int(rows.shape[0]),
    )


# -- language boundaries -----------------------------------------------

def frame_language(post_lid, floor=1e-6):
    """Per-frame language from an LID posteriorgram over (<blank>, <A>, <B>).

    Blank is dropped and the two language columns compared; ties go to A.
    Frames where both language posteriors are below ``floor`` are Unknown.
    """
    post_lid = np.asarray(post_lid)
    pa, pb = post_lid[:, 1], post_lid[:, 2]
    labels = np.where(pb > pa, LANG_B, LANG_A).astype(object)
    labels[(pa < floor) & (pb < floor)] = UNKNOWN
    return list(labels)


def _fill_unknown(labels):
    known = [l for l in labels if l != UNKNOWN]
    if not known:
        return []
    out = []
    last = known[0]
    for l in labels:
        if l != UNKNOWN:
            last = l
        out.append(last)
    return out


def switch_points(labels):
    return [i for i in range(1, len(labels)) if labels[i] != labels[i - 1]]


@dataclass
class BoundaryReport:
    median_offset: float
    signed_median_offset: float
    f1: float
    precision: float
    recall: float
    blank_coverage: float = float("nan")
    n_gold: int = 0
    n_pred: int = 0
    n_matched: int = 0
    offsets: list = field(default_factory=list, repr=False)
    signed_offsets: list = field(default_factory=list, repr=False)

    @property
    def mean_offset(self):
        return float(np.mean(self.offsets)) if self.offsets else 0.0

    def summary(self):
        d = asdict(self)
        d.pop("offsets")
        d.pop("signed_offsets")
        d["mean_offset"] = self.mean_offset
        return d


def _f1(n_matched, n_pred, n_gold):
    if n_gold == 0 and n_pred == 0:
        return 1.0, 1.0, 1.0
    precision = n_matched / n_pred if n_pred else 0.0
    recall = n_matched / n_gold if n_gold else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return f1, precision, recall


def boundary_metrics(pred_frame_langs, gold_frame_langs, tol=2, lid_post=None):
    """Switch-point timing of predicted vs gold per-frame language labels.

    Unknown predicted frames inherit the previous known label. Each gold
    switch's offset is the distance to its nearest predicted switch (the
    utterance length when none is predicted). Predicted and gold switches
    within ``tol`` frames are matched greedily, nearest pairs first.
    """
    if len(pred_frame_langs) != len(gold_frame_langs):
        raise ValueError("predicted and gold label sequences differ in length")
    L = len(gold_frame_langs)
    gold = switch_points(list(gold_frame_langs))
    pred = switch_points(_fill_unknown(list(pred_frame_langs)))
    offsets, signed = [], []
    for g in gold:
        if pred:
            p = min(pred, key=lambda q: (abs(q - g), q))
            offsets.append(abs(p - g))
            signed.append(p - g)
        else:
            offsets.append(L)
            signed.append(L)
    pairs = sorted((abs(p - g), g, p) for g in gold for p in pred if abs(p - g) <= tol)
    used_g, used_p = set(), set()
    for _, g, p in pairs:
        if g not in used_g and p not in used_p:
            used_g.add(g)
            used_p.add(p)
    f1, precision, recall = _f1(len(used_g), len(pred), len(gold))
    coverage = float(np.mean(np.asarray(lid_post)[:, BLANK])) if lid_post is not None else float("nan")
    return BoundaryReport(
        float(np.median(offsets)) if offsets else 0.0,
        float(np.median(signed)) if signed else 0.0,
        f1, precision, recall, coverage,
        len(gold), len(pred), len(used_g), offsets, signed,
    )


def pool_boundary_reports(reports):
    """Corpus-level report: offsets pooled over all gold switches, counts summed."""
    offsets = [o for r in reports for o in r.offsets]
    signed = [o for r in reports for o in r.signed_offsets]
    n_gold = sum(r.n_gold for r in reports)
    n_pred = sum(r.n_pred for r in reports)
    n_matched = sum(r.n_matched for r in reports)
    f1, precision, recall = _f1(n_matched, n_pred, n_gold)
    cov = [r.blank_coverage for r in reports if not np.isnan(r.blank_coverage)]
    return BoundaryReport(
        float(np.median(offsets)) if offsets else 0.0,
        float(np.median(signed)) if signed else 0.0,
        f1, precision, recall,
        float(np.mean(cov)) if cov else float("nan"),
        n_gold, n_pred, n_matched, offsets, signed,
    )


# -- export ------------------------------------------------------------

def export_posteriorgram(post, vocab_names, path):
    write_posteriorgram_csv(post, list(vocab_names), path)


# -- model inference ---------------------------------------------------

@dataclass
class Inference:
    ids: list
    log_posts: list
    lid_posts: list
    gates: list


def infer(model, utts, batch_size=32):
    """Eval-mode forward; returns per-utterance posteriorgrams trimmed to length."""
    cfg = model.config
    out = Inference([], [], [], [])
    for start in range(0, len(utts), batch_size):
        chunk = utts[start : start + batch_size]
        batch = make_batch(chunk, cfg.lid_mode, cfg.lat_per_token, with_targets=False)
        res = model.forward(batch, mode="eval")
        for i, u in enumerate(chunk):
            L = u.n_frames
            out.ids.append(u.id)
            out.log_posts.append(res.log_post.data[i, :L].copy())
            lid = res.taps.lid_post
            out.lid_posts.append(None if lid is None else lid[i, :L].copy())
            out.gates.append(None if res.taps.gate is None else res.taps.gate[i, :L].copy())
    return out


def decode(log_posts, decoder="beam", width=10):
    if decoder == "greedy":
        return [greedy_decode(lp) for lp in log_posts]
    return [prefix_beam_decode(lp, width) for lp in log_posts]


def evaluate_model(model, utts, decoder="beam", width=10, tau=0.9, tol=2, batch_size=32):
    """MER, peakiness (final and LID heads) and LID boundary timing on ``utts``."""
    inf = infer(model, utts, batch_size)
    hyps = decode(inf.log_posts, decoder, width)
    lang_of = model.config.vocab.lang_of
    report = {"mer": mer(hyps, [u.tokens for u in utts], lang_of).to_dict()}
    report["peakiness_final"] = asdict(peakiness([np.exp(lp) for lp in inf.log_posts], tau))
    if inf.lid_posts and inf.lid_posts[0] is not None:
        report["peakiness_lid"] = asdict(peakiness(inf.lid_posts, tau))
        per_utt = [
            boundary_metrics(frame_language(lp), u.frame_langs, tol, lp)
            for lp, u in zip(inf.lid_posts, utts)
        ]
        report["boundary"] = pool_boundary_reports(per_utt).summary()
    return report, hyps, inf


# -- ablation ----------------------------------------------------------

TABLE3_VARIANTS = ("scctc", "scctc_lidall", "scctc_lid3")
TABLE3_ALPHAS = (0.0, 0.1, 0.2, 0.3, 0.4, 0.5)

_REPORT_COLUMNS = [
    "variant", "alpha", "n_seeds", "mer", "rate_a", "rate_b",
    "blank_dominance_final", "blank_dominance_lid", "mean_max_lid", "boundary_median_offset", "boundary_f1",
]


def cell_name(variant, alpha, seed):
    return f"{variant}_a{alpha:.2f}_s{seed}"


def run_ablation(train_utts, valid_utts, test_utts, base_config, alphas, seeds, out_dir,
                 variants=None, decoder="beam", width=10, tau=0.9, tol=2, log=print):
    """Train/evaluate every (variant, alpha, seed) cell and aggregate a report.

    Each cell's result is persisted as JSON under ``out_dir/cells``; cells
    with an existing result file are loaded instead of retrained.
    ``base_config`` is a ``RunConfig``.
    """
    from .trainer import train

    variants = list(variants or [base_config.model.variant])
    cells_dir = os.path.join(out_dir, "cells")
    os.makedirs(cells_dir, exist_ok=True)
    results = []
    for variant in variants:
        for alpha in alphas:
            for seed in seeds:
                name = cell_name(variant, alpha, seed)
                path = os.path.join(cells_dir, name + ".json")
                if os.path.exists(path):
                    with open(path) as fh:
                        results.append(json.load(fh))
                    log(f"[ablate] {name}: cached")
                    continue
                cfg = base_config.replace(model={"variant": variant, "alpha": float(alpha)}, train={"seed": int(seed)})
                t0 = time.perf_counter()
                result = train(cfg, train_utts, valid_utts, os.path.join(out_dir, "runs", name), log=log)
                train_seconds = time.perf_counter() - t0
                report, _, _ = evaluate_model(result.model, test_utts, decoder, width, tau, tol)
                cell = {"variant": variant, "alpha": float(alpha), "seed": int(seed), "report": report,
                        "train_seconds": train_seconds}
                tmp = path + ".tmp"
                with open(tmp, "w") as fh:
                    json.dump(cell, fh, indent=1, sort_keys=True)
                os.replace(tmp, path)
                results.append(cell)
                log(f"[ablate] {name}: MER {report['mer']['mer']:.4f}")
    return summarize_ablation(results)


def load_cells(out_dir):
    cells_dir = os.path.join(out_dir, "cells")
    cells = []
    for name in sorted(os.listdir(cells_dir)):
        if name.endswith(".json"):
            with open(os.path.join(cells_dir, name)) as fh:
                cells.append(json.load(fh))
    return cells


def summarize_ablation(cells):
    """One row per (variant, alpha), metrics averaged over seeds."""
    groups = {}
    for c in cells:
        groups.setdefault((c["variant"], c["alpha"]), []).append(c["report"])
    rows = []
    order = {v: i for i, v in enumerate(TABLE3_VARIANTS)}
    for (variant, alpha), reps in sorted(groups.items(), key=lambda kv: (order.get(kv[0][0], 99), kv[0][0], kv[0][1])):
        def avg(get):
            vals = [get(r) for r in reps]
            vals = [v for v in vals if v is not None]
            return float(statistics.fmean(vals)) if vals else float("nan")

        rows.append({
            "variant": variant,
            "alpha": alpha,
            "n_seeds": len(reps),
            "mer": avg(lambda r: r["mer"]["mer"]),
            "rate_a": avg(lambda r: r["mer"]["rate_a"]),
            "rate_b": avg(lambda r: r["mer"]["rate_b"]),
            "blank_dominance_final": avg(lambda r: r.get("peakiness_final", {}).get("blank_dominance")),
            "blank_dominance_lid": avg(lambda r: r.get("peakiness_lid", {}).get("blank_dominance")),
            "mean_max_lid": avg(lambda r: r.get("peakiness_lid", {}).get("mean_max")),
            "boundary_median_offset": avg(lambda r: r.get("boundary", {}).get("median_offset")),
            "boundary_f1": avg(lambda r: r.get("boundary", {}).get("f1")),
        })
    return rows


def write_ablation_csv(rows, path):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=_REPORT_COLUMNS)
        writer.writeheader()
        for r in rows:
            writer.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in r.items()})


def format_ablation_table(rows):
    """Fixed-width text table; alpha 0 prints as '-' (plain CTC).

    ``blank`` is the final head's blank-dominance fraction, ``LIDblank`` the
    LID head's (nan for variants without one).
    """
    head = (f"{'Model':<14}{'alpha':>6}{'MER%':>8}{'A%':>8}{'B%':>8}{'blank':>8}{'LIDblank':>10}"
            f"{'offset':>8}{'F1':>7}{'seeds':>6}")
    lines = [head, "-" * len(head)]
    for r in rows:
        alpha = "-" if r["alpha"] == 0 else f"{r['alpha']:.1f}"
        lines.append(
            f"{r['variant']:<14}{alpha:>6}{100 * r['mer']:>8.2f}{100 * r['rate_a']:>8.2f}{100 * r['rate_b']:>8.2f}"
            f"{r['blank_dominance_final']:>8.3f}{r['blank_dominance_lid']:>10.3f}{r['boundary_median_offset']:>8.2f}{r['boundary_f1']:>7.3f}{r['n_seeds']:>6d}"
        )
    return "\n".join(lines)
