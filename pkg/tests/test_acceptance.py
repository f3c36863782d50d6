"""Acceptance criteria 1-8, each reporting one PASS/FAIL line.

Criteria 5 and 6 train the desk configuration (9 runs of about 6-7 minutes
on one core). Trained cells are cached per source-code hash when
``LATTICE_LID_ACCEPTANCE_CACHE`` names a directory; otherwise they live in a
per-session temporary directory and everything is retrained.
"""

import hashlib
import json
import math
import os
import pathlib
import statistics
import time

import numpy as np
import pytest

import lattice_lid
from lattice_lid import _kernels, cli, ctc
from lattice_lid import evaluation as ev
from lattice_lid import model as md
from lattice_lid import numerics as nx
from lattice_lid import trainer as tr
from lattice_lid.config import DataConfig, RunConfig, desk_preset
from lattice_lid.corpus import CorpusSpec, generate_corpus, load_corpus, save_corpus

SRC = pathlib.Path(lattice_lid.__file__).parent


def rel_err(analytic, fd):
    return float(np.max(np.abs(analytic - fd)) / max(np.max(np.abs(fd)), 1e-12))


def random_log_post(rng, L, V):
    x = rng.normal(size=(L, V)) * 1.5
    return x - np.log(np.exp(x).sum(axis=1, keepdims=True))


def random_instance(rng, max_l=6, max_s=3, max_v=4):
    L = int(rng.integers(1, max_l + 1))
    V = int(rng.integers(2, max_v + 1))
    while True:
        S = int(rng.integers(0, max_s + 1))
        y = [int(t) for t in rng.integers(1, V, size=S)]
        if ctc.min_frames(y) <= L:
            return random_log_post(rng, L, V), y


# -- shared desk-scale training --------------------------------------------

def _code_hash():
    h = hashlib.sha256()
    for path in sorted(SRC.glob("*.py")):
        h.update(path.name.encode())
        h.update(path.read_bytes())
    h.update(json.dumps(desk_preset().to_dict(), sort_keys=True).encode())
    return h.hexdigest()[:16]


@pytest.fixture(scope="session")
def desk_dir(tmp_path_factory):
    root = os.environ.get("LATTICE_LID_ACCEPTANCE_CACHE")
    if root:
        path = pathlib.Path(root) / _code_hash()
        path.mkdir(parents=True, exist_ok=True)
        return path
    return tmp_path_factory.mktemp("desk")


@pytest.fixture(scope="session")
def desk_data():
    cfg = desk_preset()
    return cfg, cfg.data.split(generate_corpus(cfg.corpus, cfg.data.n_utts))


def desk_cells(desk_dir, desk_data, alphas, seeds):
    cfg, (train_utts, valid_utts, test_utts) = desk_data
    e = cfg.eval
    ev.run_ablation(train_utts, valid_utts, test_utts, cfg, alphas, seeds, str(desk_dir),
                    decoder=e.decoder, width=e.beam_width, tau=e.tau, tol=e.boundary_tol,
                    log=lambda msg: print(msg, flush=True))
    cells = {}
    for a in alphas:
        for s in seeds:
            with open(desk_dir / "cells" / (ev.cell_name(cfg.model.variant, a, s) + ".json")) as fh:
                cells[(a, s)] = json.load(fh)
    return cells


# -- 1 ---------------------------------------------------------------------

def test_criterion_1_ctc_matches_brute_force(acceptance_record):
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(500):
        lp, y = random_instance(rng)
        worst = max(worst, abs(ctc.ctc_loss(lp, y).item() - ctc.brute_force_ctc(lp, y)))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-9 and elapsed < 10.0
    acceptance_record(1, ok, f"500 instances, max |diff| {worst:.2e} (<= 1e-9), {elapsed:.2f}s (< 10s)")
    assert ok


# -- 2 ---------------------------------------------------------------------

def test_criterion_2_npc_reductions(acceptance_record):
    rng = np.random.default_rng(7)
    worst_zero = worst_adj = 0.0
    for _ in range(200):
        lp, y = random_instance(rng, max_l=8, max_s=4, max_v=5)
        L = lp.shape[0]
        worst_zero = max(worst_zero, abs(ctc.npc_loss(lp, y, ctc.NpcConfig(0.0)).item() - ctc.ctc_loss(lp, y).item()))
        alpha = float(rng.uniform(0.05, 1.0))
        adj = ctc.adjusted_scores(lp, np.exp(lp).mean(axis=0), alpha)
        forward = float(_kernels.ctc_batch(adj[None], [L], [y])[0][0])
        worst_adj = max(worst_adj, abs(ctc.npc_loss(lp, y, ctc.NpcConfig(alpha)).item() - forward))
    hand = ctc.npc_loss(np.log(np.full((2, 2), 0.5)), [1], ctc.NpcConfig(0.5)).item()
    hand_err = abs(hand + math.log(1.5))
    ok = worst_zero <= 1e-12 and worst_adj <= 1e-12 and hand_err <= 1e-12
    acceptance_record(2, ok, f"alpha=0 vs CTC {worst_zero:.1e}, vs adjusted-score forward {worst_adj:.1e}, "
                             f"hand case {hand:.12f} (err {hand_err:.1e})")
    assert ok


# -- 3 ---------------------------------------------------------------------

class _FrozenPrior:
    """Record priors on the first pass, replay them afterwards."""

    def __init__(self, real):
        self.real = real
        self.saved = []
        self.replay = None

    def __call__(self, post, lengths=None):
        if self.replay is None:
            out = self.real(post, lengths)
            self.saved.append(np.array(out))
            return out
        out = self.replay[self.i]
        self.i += 1
        return out

    def freeze(self):
        self.replay = list(self.saved)
        self.i = 0

    def rewind(self):
        self.i = 0


def _grad_ctc(seed):
    rng = np.random.default_rng(seed)
    logits = rng.normal(size=(5, 4))
    y = [1, 3] if seed % 2 else [2, 2]
    p = nx.parameter(logits)
    ctc.ctc_loss(nx.log_softmax(p), y).backward()
    fd = nx.finite_difference_grad(lambda x: ctc.ctc_loss(nx.log_softmax(nx.Tensor(x)), y).item(), logits)
    return rel_err(p.grad, fd)


def _grad_npc_detached(seed, monkeypatch):
    rng = np.random.default_rng(seed)
    logits = rng.normal(size=(2, 5, 4))
    targets, lengths = [[1, 3], [2]], [5, 3]
    cfg = ctc.NpcConfig(0.3)
    frozen = _FrozenPrior(ctc.softmax_prior)
    monkeypatch.setattr(ctc, "softmax_prior", frozen)
    p = nx.parameter(logits)
    ctc.npc_loss_batch(nx.log_softmax(p), lengths, targets, cfg).sum().backward()
    frozen.freeze()

    def f(x):
        frozen.rewind()
        return float(ctc.npc_loss_batch(nx.log_softmax(nx.Tensor(x)), lengths, targets, cfg).data.sum())

    fd = nx.finite_difference_grad(f, logits)
    monkeypatch.setattr(ctc, "softmax_prior", frozen.real)
    return rel_err(p.grad, fd)


def _grad_disentangle(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(2, 2, 5, 4))
    mask = np.array([[True] * 5, [True] * 3 + [False] * 2])
    pa = nx.parameter(a)
    md.disentangle_loss(pa, b, mask).sum().backward()
    fd = nx.finite_difference_grad(lambda x: float(md.disentangle_loss(x, b, mask).data.sum()), a)
    return rel_err(pa.grad, fd)


def _grad_full_objective(monkeypatch):
    """Whole Proposed objective on a dim-8 model, prior frozen as in training."""
    spec = CorpusSpec(vocab_a=3, vocab_b=3, feature_dim=4, min_tokens=2, max_tokens=4, seed=3)
    utts = generate_corpus(spec, 2)
    cfg = md.ModelConfig(variant="proposed", input_dim=4, vocab_a=3, vocab_b=3, dim=8, ff_dim=16, heads=2,
                         shared_blocks=2, expert_blocks=1, lid_tap=1, gt_tap=2, alpha=0.3, lambda_dis=10.0)
    model = md.CodeSwitchEncoder(cfg, seed=0)
    rng = np.random.default_rng(1)
    for name, t in model.params.items():
        if name.startswith(("cond.", "inject_")):
            t.data[...] = rng.normal(scale=0.3, size=t.shape)
    batch = md.make_batch(utts)
    frozen = _FrozenPrior(ctc.softmax_prior)
    monkeypatch.setattr(ctc, "softmax_prior", frozen)
    model.forward(batch).losses.objective.backward()
    frozen.freeze()
    names = sorted(model.params)
    x0 = np.concatenate([model.params[n].data.ravel() for n in names])
    analytic = np.concatenate([model.params[n].grad.ravel() for n in names])

    def f(vec):
        off = 0
        for n in names:
            t = model.params[n]
            t.data[...] = vec[off: off + t.size].reshape(t.shape)
            off += t.size
        frozen.rewind()
        return model.forward(batch).losses.objective.item()

    fd = nx.finite_difference_grad(f, x0.copy())
    monkeypatch.setattr(ctc, "softmax_prior", frozen.real)
    return rel_err(analytic, fd)


def test_criterion_3_gradients(acceptance_record, monkeypatch):
    errs = {
        "ctc": max(_grad_ctc(s) for s in range(10)),
        "npc": max(_grad_npc_detached(s, monkeypatch) for s in range(10)),
        "disentangle": max(_grad_disentangle(s) for s in range(10)),
    }
    full = _grad_full_objective(monkeypatch)
    ok = all(v <= 1e-6 for v in errs.values()) and full <= 1e-4
    detail = ", ".join(f"{k} {v:.1e}" for k, v in errs.items())
    acceptance_record(3, ok, f"rel err {detail} (<= 1e-6); full objective dim 8 {full:.1e} (<= 1e-4)")
    assert ok


# -- 4 ---------------------------------------------------------------------

def test_criterion_4_padding_invariance(acceptance_record, desk_data):
    cfg, (train_utts, _, _) = desk_data
    utts = sorted(train_utts[:40], key=lambda u: u.n_frames)[::5]
    worst = 0.0
    checked = 0
    for variant in md.VARIANTS:
        model = md.CodeSwitchEncoder(md.ModelConfig(**{**cfg.model.to_dict(), "variant": variant}), seed=1)
        rng = np.random.default_rng(2)
        for name, t in model.params.items():
            if name.startswith(("cond.", "inject_")):
                t.data[...] = rng.normal(scale=0.1, size=t.shape)
        together = model.forward(md.make_batch(utts)).losses.per_utterance()
        for i, u in enumerate(utts):
            alone = model.forward(md.make_batch([u])).losses.per_utterance()
            assert set(alone) == set(together)
            for key in alone:
                worst = max(worst, abs(alone[key][0] - together[key][i]))
                checked += 1
    ok = worst <= 1e-5
    acceptance_record(4, ok, f"{checked} component values over {len(md.VARIANTS)} variants, max |diff| {worst:.1e} (<= 1e-5)")
    assert ok


# -- 5 ---------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_5_desk_learnability(acceptance_record, desk_dir, desk_data):
    cfg = desk_data[0]
    cell = desk_cells(desk_dir, desk_data, [0.3], [1])[(0.3, 1)]
    rate = cell["report"]["mer"]["mer"]
    minutes = cell["train_seconds"] / 60
    n_test = cell["report"]["mer"]["n_utts"]
    ok = rate <= 0.20 and minutes <= 30 and n_test == 200 and cfg.train.epochs == 40
    acceptance_record(5, ok, f"held-out MER {rate:.4f} (<= 0.20) on {n_test} utts, "
                             f"{cfg.train.epochs} epochs in {minutes:.1f} min (<= 30)")
    assert ok


# -- 6 ---------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_6_npc_directional_effect(acceptance_record, desk_dir, desk_data):
    seeds = [1, 2, 3]
    cells = desk_cells(desk_dir, desk_data, [0.0, 0.3, 0.5], seeds)

    def mean(alpha, get):
        return statistics.fmean(get(cells[(alpha, s)]["report"]) for s in seeds)

    def blank(r):
        return r["peakiness_lid"]["blank_dominance"]

    def offset(r):
        return r["boundary"]["median_offset"]

    summary = {a: (mean(a, blank), mean(a, offset), mean(a, lambda r: r["mer"]["mer"])) for a in (0.0, 0.3, 0.5)}
    for a, (b, o, m) in summary.items():
        extra = mean(a, lambda r: r["boundary"]["mean_offset"]), mean(a, lambda r: r["boundary"]["f1"])
        print(f"alpha {a}: LID blank dominance {b:.5f}, median offset {o:.3f}, MER {m:.4f}, "
              f"mean offset {extra[0]:.3f}, boundary F1 {extra[1]:.3f}")
    ok_a = summary[0.3][0] < summary[0.0][0]
    ok_b = summary[0.3][1] < summary[0.0][1]
    detail = (f"(a) LID blank dominance {summary[0.3][0]:.4f} < {summary[0.0][0]:.4f}: {ok_a}; "
              f"(b) median offset {summary[0.3][1]:.3f} < {summary[0.0][1]:.3f}: {ok_b}; "
              f"alpha 0.5 reported: blank {summary[0.5][0]:.4f}, offset {summary[0.5][1]:.3f}, MER {summary[0.5][2]:.4f}")
    acceptance_record(6, ok_a and ok_b, detail)
    assert ok_a, detail
    assert ok_b, detail


# -- 7 ---------------------------------------------------------------------

SWEEP_CONFIG = {
    "corpus": {"vocab_a": 4, "vocab_b": 4, "feature_dim": 4, "min_tokens": 2, "max_tokens": 4, "seed": 5},
    "data": {"n_utts": 30, "n_valid": 6, "n_test": 6},
    "model": {"input_dim": 4, "vocab_a": 4, "vocab_b": 4, "dim": 8, "ff_dim": 16, "heads": 2,
              "n_blocks": 3, "taps": [1, 2], "lid_tap": 2},
    "train": {"epochs": 1, "warmup": 5, "batch_size": 8, "keep_checkpoints": 1, "average_top_k": 1},
    "eval": {"beam_width": 2},
}


def test_criterion_7_ablation_harness(acceptance_record, tmp_path, capsys, monkeypatch):
    monkeypatch.delenv("LATTICE_LID_SEED", raising=False)
    config = tmp_path / "sweep.json"
    config.write_text(json.dumps(SWEEP_CONFIG))
    out = tmp_path / "ablate"
    alphas = "0,0.1,0.2,0.3,0.4,0.5"
    variants = ["scctc", "scctc_lidall", "scctc_lid3"]
    args = ["ablate", "--config", str(config), "--out", str(out), "--alphas", alphas, "--seeds", "1",
            "--variants", ",".join(variants)]
    assert cli.main(args) == 0
    first = capsys.readouterr().out
    report = (out / "report.csv").read_text()
    rows = [r.split(",") for r in report.splitlines()]
    header, body = rows[0], rows[1:]
    expected = [(v, a) for v in variants for a in (0.0, 0.1, 0.2, 0.3, 0.4, 0.5)]
    shape_ok = [(r[0], float(r[1])) for r in body] == expected
    col = {name: i for i, name in enumerate(header)}
    always = ["mer", "rate_a", "rate_b", "blank_dominance_final"]
    lid_cols = ["blank_dominance_lid", "mean_max_lid", "boundary_median_offset", "boundary_f1"]
    filled = all(math.isfinite(float(r[col[c]])) for r in body for c in always)
    filled &= all(math.isfinite(float(r[col[c]])) for r in body if r[0] != "scctc" for c in lid_cols)
    table_lines = [l for l in first.splitlines() if l.split() and l.split()[0] in variants]
    dash_ok = [l.split()[1] for l in table_lines][::6] == ["-"] * 3

    # simulate an interrupted sweep: drop two cells, rerun, expect only those retrained
    dropped = [ev.cell_name("scctc_lid3", 0.4, 1), ev.cell_name("scctc", 0.0, 1)]
    for name in dropped:
        (out / "cells" / f"{name}.json").unlink()
    assert cli.main(args) == 0
    second = capsys.readouterr().out
    n_cached = second.count(": cached")
    resumed_ok = n_cached == 16 and (out / "report.csv").read_text() == report
    ok = shape_ok and filled and len(table_lines) == 18 and dash_ok and resumed_ok
    acceptance_record(7, ok, f"{len(body)} rows x {len(header)} columns, table rows {len(table_lines)}, "
                             f"resume served {n_cached}/18 from cache, report identical after resume: {resumed_ok}")
    assert ok


# -- 8 ---------------------------------------------------------------------

def test_criterion_8_unit_suite(acceptance_record, tmp_path):
    checks = {}

    rng = np.random.default_rng(0)
    gate_err = 0.0
    for _ in range(20):
        h_a, h_b = rng.normal(size=(2, 4, 7, 16)) * 4
        _, g = md.moe_combine(nx.Tensor(h_a), nx.Tensor(h_b), rng.normal(size=(32, 2)) * 3, rng.normal(size=2))
        gate_err = max(gate_err, float(np.max(np.abs(g.data.sum(-1) - 1))))
    checks["gate sums"] = gate_err <= 1e-12

    model = md.CodeSwitchEncoder(desk_preset().model, seed=4)
    paths = []
    for i in range(4):
        paths.append(tmp_path / f"ckpt_epoch_{i + 1}.npz")
        md.save_model(paths[-1], model, meta={"epoch": i + 1, "val_mer": 0.3, "val_loss": 1.0})
    avg = tr.average_checkpoints(paths, 4)
    checks["identical averaging"] = all(np.array_equal(avg.params[n].data, t.data) for n, t in model.params.items())

    v = md.ModelConfig().vocab
    a = [v.index(f"A0{i}") for i in range(4)]
    b = [v.index(f"B0{i}") for i in range(4)]
    r1 = ev.mer([[a[0], a[1]]], [[a[0], a[1]]], v.lang_of).mer == 0.0
    r2 = ev.mer([[a[0], a[1], b[0], a[3]]], [[a[0], a[1], a[2], a[3]]], v.lang_of).mer == 0.25
    rep = ev.mer([[a[0], a[2], b[0], b[2]]], [[a[0], a[1], b[0], b[1]]], v.lang_of)
    r3 = rep.total_errors == 2 and rep.mer == 0.5 and rep.rate("A") == 0.5 and rep.rate("B") == 0.5
    checks["MER hand examples"] = r1 and r2 and r3

    checks["lr terms meet at warmup"] = all(
        math.isclose(w ** -0.5, w * w ** -1.5, rel_tol=1e-12)
        and math.isclose(tr.lr_schedule(w, 32, w), 32 ** -0.5 * w ** -0.5, rel_tol=1e-12)
        for w in (1, 500, 25000))

    spec = desk_preset().corpus
    utts = generate_corpus(spec, 50)
    save_corpus(utts, tmp_path / "c.jsonl", spec)
    checks["corpus round trip"] = load_corpus(tmp_path / "c.jsonl") == utts

    run_cfg = desk_preset().replace(data={"n_utts": 120, "n_valid": 20, "n_test": 20},
                                    train={"epochs": 2, "keep_checkpoints": 2, "average_top_k": 2})
    tr_utts, va_utts, _ = run_cfg.data.split(generate_corpus(run_cfg.corpus, 120))
    logs = []
    for name in ("first", "second"):
        tr.train(run_cfg, tr_utts, va_utts, str(tmp_path / name), log=lambda *_: None)
        logs.append((tmp_path / name / tr.METRICS).read_bytes())
    checks["run determinism"] = logs[0] == logs[1] and len(logs[0]) > 0

    ok = all(checks.values())
    acceptance_record(8, ok, "; ".join(f"{k}: {'ok' if v else 'FAILED'}" for k, v in checks.items()))
    assert ok, checks
