"""Deterministic training: inverse-sqrt warmup, Adam, per-epoch validation,
atomic checkpoints, and top-k checkpoint averaging."""

import json
import math
import os
import time
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import numerics as nx
from .evaluation import decode, infer, mer
from .model import CodeSwitchEncoder, make_batch, read_checkpoint, save_model, ModelConfig

MANIFEST = "manifest.json"
METRICS = "metrics.jsonl"
FINAL = "model_avg.npz"


class TrainingDiverged(RuntimeError):
    pass


class NonFiniteGradient(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 40
    warmup: int = 500
    lr_scale: float = 1.0
    batch_size: int = 16
    seed: int = 0
    keep_checkpoints: int = 10
    average_top_k: int = 10
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-9
    grad_clip: float = 0.0
    bucket: int = 8
    valid_batch_size: int = 32

    def __post_init__(self):
        if self.warmup < 1:
            raise ValueError("warmup must be >= 1")
        if self.average_top_k > self.keep_checkpoints:
            raise ValueError("average_top_k cannot exceed keep_checkpoints")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


def lr_schedule(step, dim, warmup, scale=1.0):
    """scale * dim^-0.5 * min(step^-0.5, step * warmup^-1.5)."""
    if step < 1:
        raise ValueError("step counts from 1")
    return scale * dim ** -0.5 * min(step ** -0.5, step * warmup ** -1.5)


# -- Adam --------------------------------------------------------------

class AdamState:
    def __init__(self, params=None):
        self.step = 0
        self.m = {}
        self.v = {}
        for name, t in (params or {}).items():
            self.m[name] = np.zeros_like(t.data)
            self.v[name] = np.zeros_like(t.data)

    def arrays(self):
        out = {f"adam_m/{k}": v for k, v in self.m.items()}
        out.update({f"adam_v/{k}": v for k, v in self.v.items()})
        return out

    @classmethod
    def from_arrays(cls, arrays, step):
        state = cls()
        state.step = int(step)
        for key, arr in arrays.items():
            kind, name = key.split("/", 1)
            if kind == "adam_m":
                state.m[name] = arr
            elif kind == "adam_v":
                state.v[name] = arr
        return state


def adam_step(params, grads, state, lr, beta1=0.9, beta2=0.98, eps=1e-9):
    """Bias-corrected Adam update, in place on ``params`` (name -> Tensor)."""
    for name in sorted(grads):
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient for parameter {name!r}")
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name in sorted(params):
        p = params[name]
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if p.data.shape != g.shape:
            raise nx.ShapeError(f"gradient shape {g.shape} != parameter {name} shape {p.data.shape}")
        m = state.m.setdefault(name, np.zeros_like(p.data))
        v = state.v.setdefault(name, np.zeros_like(p.data))
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return params, state


def clip_gradients(grads, max_norm):
    total = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / total
        grads = {k: g * scale for k, g in grads.items()}
    return grads, total


# -- batching ----------------------------------------------------------

def make_batches(utts, batch_size, seed, epoch=0, bucket=8, lid_mode="per_token", lat_per_token=False):
    """Seeded shuffle, then padded batches with masks.

    With ``bucket > 1`` the shuffled order is cut into pools of
    ``bucket * batch_size`` utterances that are length-sorted before slicing,
    so batches carry less padding; batch order is shuffled again afterwards.
    """
    rng = np.random.default_rng([seed, epoch])
    order = rng.permutation(len(utts))
    groups = []
    if bucket > 1:
        pool = bucket * batch_size
        for start in range(0, len(order), pool):
            chunk = sorted(order[start : start + pool], key=lambda i: (utts[i].n_frames, i))
            groups.extend(chunk[j : j + batch_size] for j in range(0, len(chunk), batch_size))
        groups = [groups[i] for i in rng.permutation(len(groups))]
    else:
        groups = [order[j : j + batch_size] for j in range(0, len(order), batch_size)]
    return [make_batch([utts[i] for i in g], lid_mode, lat_per_token) for g in groups]


# -- checkpoints -------------------------------------------------------

def _ckpt_name(epoch):
    return f"ckpt_epoch_{epoch}.npz"


def _read_manifest(out_dir):
    path = os.path.join(out_dir, MANIFEST)
    if not os.path.exists(path):
        return []
    with open(path) as fh:
        return json.load(fh)["checkpoints"]


def _write_manifest(out_dir, entries):
    tmp = os.path.join(out_dir, MANIFEST + ".tmp")
    with open(tmp, "w") as fh:
        json.dump({"checkpoints": entries}, fh, indent=1)
    os.replace(tmp, os.path.join(out_dir, MANIFEST))


def _rank_key(entry):
    return (entry["val_mer"], entry["val_loss"], entry["epoch"])


def average_checkpoints(paths, k, scores=None):
    """Mean of every parameter over the ``k`` best checkpoints.

    Ranking is by validation MER, then validation loss, then earlier epoch;
    ``scores`` (one dict per path) overrides the values stored in the files.
    """
    if len(paths) < k:
        raise ValueError(f"need {k} checkpoints, got {len(paths)}")
    loaded = []
    for i, path in enumerate(paths):
        meta, params, _ = read_checkpoint(path)
        score = dict(scores[i]) if scores is not None else {
            "val_mer": meta.get("val_mer", 0.0), "val_loss": meta.get("val_loss", 0.0), "epoch": meta.get("epoch", i)}
        loaded.append((score, meta, params))
    config = loaded[0][1]["config"]
    for _, meta, _ in loaded[1:]:
        if meta["config"] != config:
            raise ValueError("checkpoints come from incompatible model configurations")
    best = sorted(loaded, key=lambda item: _rank_key(item[0]))[:k]
    names = sorted(best[0][2])
    avg = {}
    for name in names:
        # offsets from the first checkpoint, so identical inputs average exactly
        ref = best[0][2][name]
        acc = np.zeros_like(ref)
        for _, _, params in best[1:]:
            acc += params[name] - ref
        avg[name] = ref + acc / len(best)
    return CodeSwitchEncoder(ModelConfig.from_dict(config), params={n: nx.parameter(v) for n, v in avg.items()})


# -- the loop ----------------------------------------------------------

@dataclass
class TrainResult:
    model: CodeSwitchEncoder
    last_model: CodeSwitchEncoder
    metrics: list
    out_dir: str


def validate(model, utts, batch_size=32):
    """Mean validation loss components and greedy-decoding MER."""
    cfg = model.config
    sums, n = {}, 0
    for start in range(0, len(utts), batch_size):
        chunk = utts[start : start + batch_size]
        out = model.forward(make_batch(chunk, cfg.lid_mode, cfg.lat_per_token), mode="eval")
        for k, v in out.losses.per_utterance().items():
            sums[k] = sums.get(k, 0.0) + float(v.sum())
        n += len(chunk)
    inf = infer(model, utts, batch_size)
    hyps = decode(inf.log_posts, "greedy")
    rate = mer(hyps, [u.tokens for u in utts], cfg.vocab.lang_of).mer
    return {k: v / n for k, v in sums.items()}, rate


def train(run_config, train_utts, valid_utts, out_dir, resume=False, log=print, max_steps=None):
    """Train ``run_config.model`` on ``train_utts``; see module docstring.

    Writes ``ckpt_epoch_<n>.npz``, ``manifest.json``, ``metrics.jsonl``,
    ``config.json`` and the averaged ``model_avg.npz`` into ``out_dir``.
    """
    mcfg, tcfg = run_config.model, run_config.train
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "config.json"), "w") as fh:
        json.dump(run_config.to_dict(), fh, indent=1, sort_keys=True)

    model = CodeSwitchEncoder(mcfg, seed=tcfg.seed)
    state = AdamState(model.params)
    start_epoch = 1
    manifest = []
    metrics = []
    metrics_path = os.path.join(out_dir, METRICS)
    if resume:
        manifest = _read_manifest(out_dir)
        if manifest:
            last = max(manifest, key=lambda e: e["epoch"])
            meta, params, extra = read_checkpoint(os.path.join(out_dir, last["path"]))
            model.load_state_dict(params)
            state = AdamState.from_arrays(extra, meta["step"])
            start_epoch = meta["epoch"] + 1
            with open(metrics_path) as fh:
                metrics = [json.loads(l) for l in fh if l.strip()][: meta["epoch"]]
    with open(metrics_path, "w") as fh:
        for rec in metrics:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")

    for epoch in range(start_epoch, tcfg.epochs + 1):
        t0 = time.perf_counter()
        drop_rng = np.random.default_rng([tcfg.seed, epoch, 1]) if mcfg.dropout > 0 else None
        batches = make_batches(train_utts, tcfg.batch_size, tcfg.seed, epoch, tcfg.bucket,
                               mcfg.lid_mode, mcfg.lat_per_token)
        sums, n_utt = {}, 0
        grad_norm = 0.0
        for batch in batches:
            try:
                out = model.forward(batch, mode="train", rng=drop_rng)
                objective = out.losses.objective
                objective.backward()
            except nx.NonFiniteError as exc:
                raise TrainingDiverged(f"epoch {epoch}, step {state.step + 1}: {exc}") from exc
            grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in model.params.items()}
            model.zero_grad()
            grads, grad_norm = clip_gradients(grads, tcfg.grad_clip)
            lr = lr_schedule(state.step + 1, mcfg.dim, tcfg.warmup, tcfg.lr_scale)
            adam_step(model.params, grads, state, lr, tcfg.beta1, tcfg.beta2, tcfg.eps)
            for k, v in out.losses.per_utterance().items():
                sums[k] = sums.get(k, 0.0) + float(v.sum())
            n_utt += batch.size
            if max_steps is not None and state.step >= max_steps:
                break
        val_losses, val_mer = validate(model, valid_utts, tcfg.valid_batch_size)
        if not math.isfinite(val_losses["total"]):
            raise TrainingDiverged(f"epoch {epoch}: non-finite validation loss")
        record = {
            "epoch": epoch,
            "step": state.step,
            "lr": lr_schedule(max(state.step, 1), mcfg.dim, tcfg.warmup, tcfg.lr_scale),
            "train": {k: v / n_utt for k, v in sums.items()},
            "val_loss": val_losses["total"],
            "val": val_losses,
            "val_mer": val_mer,
            "grad_norm": grad_norm,
        }
        name = _ckpt_name(epoch)
        save_model(os.path.join(out_dir, name), model,
                   meta={"epoch": epoch, "step": state.step, "val_mer": val_mer, "val_loss": val_losses["total"],
                         "seed": tcfg.seed},
                   arrays=state.arrays())
        manifest.append({"epoch": epoch, "path": name, "val_mer": val_mer, "val_loss": val_losses["total"]})
        manifest = _prune(out_dir, manifest, tcfg.keep_checkpoints)
        _write_manifest(out_dir, manifest)
        metrics.append(record)
        with open(metrics_path, "a") as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")
        log(f"epoch {epoch:3d} step {state.step:6d} train {record['train']['total']:.4f} "
            f"val {val_losses['total']:.4f} MER {val_mer:.4f} ({time.perf_counter() - t0:.1f}s)")
        if max_steps is not None and state.step >= max_steps:
            break

    k = min(tcfg.average_top_k, len(manifest))
    paths = [os.path.join(out_dir, e["path"]) for e in manifest]
    averaged = average_checkpoints(paths, k)
    save_model(os.path.join(out_dir, FINAL), averaged,
               meta={"averaged": [e["epoch"] for e in sorted(manifest, key=_rank_key)[:k]]})
    return TrainResult(averaged, model, metrics, out_dir)


def _prune(out_dir, manifest, keep):
    """Keep the ``keep`` best checkpoints plus the latest (needed to resume)."""
    latest = max(e["epoch"] for e in manifest)
    ranked = sorted(manifest, key=_rank_key)
    kept = {e["epoch"] for e in ranked[:keep]} | {latest}
    for e in manifest:
        if e["epoch"] not in kept:
            path = os.path.join(out_dir, e["path"])
            if os.path.exists(path):
                os.remove(path)
    return [e for e in manifest if e["epoch"] in kept]
