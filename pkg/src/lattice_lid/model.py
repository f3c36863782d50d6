"""Transformer CTC encoders for code-switching recognition.

Variants share one parameter layout convention and one forward routine:

* ``baseline``      plain encoder stack + CTC head
* ``scctc``         intermediate CTC at ``taps`` with self-conditioning
* ``scctc_lid3``    as scctc, but the ``lid_tap`` layer is trained on language indicators
* ``scctc_lidall``  every tap trained on language indicators
* ``dmoe``          shared encoder, two language experts, gate, disentanglement
* ``proposed``      dmoe + LID tap + ground-truth tap (non-peaky) + LID posterior injection
"""

import io
import json
import math
import os
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import numerics as nx
from .corpus import PER_TOKEN, LID_MODES, build_lat_target, build_lid_target, build_mixed_target
from .ctc import LANG_A, LANG_B, NpcConfig, Vocabulary, npc_loss_batch

BASELINE = "baseline"
SCCTC = "scctc"
SCCTC_LID3 = "scctc_lid3"
SCCTC_LIDALL = "scctc_lidall"
DMOE = "dmoe"
PROPOSED = "proposed"
VARIANTS = (BASELINE, SCCTC, SCCTC_LID3, SCCTC_LIDALL, DMOE, PROPOSED)
SINGLE_STACK = (BASELINE, SCCTC, SCCTC_LID3, SCCTC_LIDALL)
MOE = (DMOE, PROPOSED)

CHECKPOINT_FORMAT = "lattice-lid-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    variant: str = PROPOSED
    input_dim: int = 16
    vocab_a: int = 20
    vocab_b: int = 20
    dim: int = 32
    ff_dim: int = 64
    heads: int = 2
    # single-stack variants
    n_blocks: int = 6
    taps: tuple = (2, 4)
    # shared-encoder variants
    shared_blocks: int = 4
    expert_blocks: int = 2
    gt_tap: int = 3
    # both families: the layer whose head predicts language indicators
    lid_tap: int = 2
    condition: bool = True
    no_condition_taps: tuple = ()
    lambda_dis: float = 10.0
    alpha: float = 0.3
    alpha_overrides: dict = field(default_factory=dict)
    backprop_through_prior: bool = False
    posterior_injection: bool = True
    lid_mode: str = PER_TOKEN
    lat_per_token: bool = False
    disentangle: str = "squared"
    dropout: float = 0.0

    def __post_init__(self):
        self.taps = tuple(int(t) for t in self.taps)
        self.no_condition_taps = tuple(int(t) for t in self.no_condition_taps)
        self.validate()

    def validate(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; choose from {VARIANTS}")
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.lid_mode not in LID_MODES:
            raise ValueError(f"lid_mode must be one of {LID_MODES}")
        if self.disentangle not in ("squared", "cosine"):
            raise ValueError("disentangle must be 'squared' or 'cosine'")
        if self.alpha < 0 or not math.isfinite(self.alpha):
            raise ValueError("alpha must be finite and >= 0")
        if self.variant in SINGLE_STACK and self.variant != BASELINE:
            for t in self.taps:
                if not 1 <= t < self.n_blocks:
                    raise ValueError(f"tap {t} not strictly inside a {self.n_blocks}-block encoder")
            if self.variant == SCCTC_LID3 and self.lid_tap not in self.taps:
                raise ValueError(f"lid_tap {self.lid_tap} must be one of taps {self.taps}")
        if self.variant == PROPOSED:
            for t in (self.lid_tap, self.gt_tap):
                if not 1 <= t <= self.shared_blocks:
                    raise ValueError(f"tap {t} outside the {self.shared_blocks}-block shared encoder")
            if self.lid_tap == self.gt_tap:
                raise ValueError("LID tap and ground-truth tap must differ")

    @property
    def vocab(self):
        return Vocabulary.code_switch(self.vocab_a, self.vocab_b)

    @property
    def n_vocab(self):
        return 4 + self.vocab_a + self.vocab_b

    def npc(self):
        return NpcConfig(self.alpha, self.backprop_through_prior, overrides=dict(self.alpha_overrides))

    def tap_targets(self):
        """{layer: 'lid' | 'gt'} for the active intermediate taps."""
        if self.variant == SCCTC:
            return {t: "gt" for t in self.taps}
        if self.variant == SCCTC_LID3:
            return {t: ("lid" if t == self.lid_tap else "gt") for t in self.taps}
        if self.variant == SCCTC_LIDALL:
            return {t: "lid" for t in self.taps}
        if self.variant == PROPOSED:
            return {self.lid_tap: "lid", self.gt_tap: "gt"}
        return {}

    def to_dict(self):
        d = asdict(self)
        d["taps"] = list(self.taps)
        d["no_condition_taps"] = list(self.no_condition_taps)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


# -- batches -----------------------------------------------------------

@dataclass
class Batch:
    ids: list
    features: np.ndarray
    lengths: np.ndarray
    mask: np.ndarray
    mixed: list = None
    lid: list = None
    lat_a: list = None
    lat_b: list = None
    frame_langs: list = None

    @property
    def size(self):
        return len(self.ids)


def make_batch(utts, lid_mode=PER_TOKEN, lat_per_token=False, with_targets=True):
    """Zero-pad features to the longest utterance and build every target kind."""
    lengths = np.array([u.n_frames for u in utts], dtype=np.int64)
    T = int(lengths.max())
    D = utts[0].features.shape[1]
    feats = np.zeros((len(utts), T, D))
    for i, u in enumerate(utts):
        feats[i, : u.n_frames] = u.features
    mask = np.arange(T)[None, :] < lengths[:, None]
    batch = Batch([u.id for u in utts], feats, lengths, mask, frame_langs=[list(u.frame_langs) for u in utts])
    if with_targets:
        vocab = Vocabulary
        batch.mixed = [build_mixed_target(u) for u in utts]
        batch.lid = [[1 if t == vocab.IND_A else 2 for t in build_lid_target(u, lid_mode)] for u in utts]
        batch.lat_a = [build_lat_target(u, LANG_A, lat_per_token) for u in utts]
        batch.lat_b = [build_lat_target(u, LANG_B, lat_per_token) for u in utts]
    return batch


# -- outputs -----------------------------------------------------------

@dataclass
class LossBreakdown:
    """Per-utterance loss components, each a (B,) tensor or None when inactive."""

    formula: str
    lambda_dis: float = 0.0
    mix: object = None
    lang_a: object = None
    lang_b: object = None
    inter_lid: object = None
    inter_gt: object = None
    disentangle: object = None
    taps: dict = field(default_factory=dict)
    total: object = None

    @property
    def objective(self):
        """Batch mean of the per-utterance totals."""
        return nx.tmean(self.total)

    def recompute_total(self):
        """Total rebuilt from the stored components with plain numpy."""
        v = {k: None if t is None else t.data for k, t in self.component_tensors().items()}
        if self.formula == "ctc":
            return v["mix"]
        if self.formula == "interctc":
            inter = np.mean([t.data for t in self.taps.values()], axis=0)
            return 0.5 * (v["mix"] + inter)
        if self.formula == "dmoe":
            return total_loss_dmoe(v["mix"], v["lang_a"], v["lang_b"], v["disentangle"], self.lambda_dis)
        return total_loss_proposed(v["mix"], v["lang_a"], v["lang_b"], v["inter_lid"], v["inter_gt"],
                                   v["disentangle"], self.lambda_dis)

    def component_tensors(self):
        return {
            "mix": self.mix, "lang_a": self.lang_a, "lang_b": self.lang_b,
            "inter_lid": self.inter_lid, "inter_gt": self.inter_gt, "disentangle": self.disentangle,
        }

    def per_utterance(self):
        out = {k: t.data.copy() for k, t in self.component_tensors().items() if t is not None}
        for layer, t in sorted(self.taps.items()):
            out[f"tap{layer}"] = t.data.copy()
        out["total"] = self.total.data.copy()
        return out

    def means(self):
        return {k: float(np.mean(v)) for k, v in self.per_utterance().items()}


@dataclass
class EncoderTapOutputs:
    final_hidden: object = None
    tap_hidden: dict = field(default_factory=dict)
    tap_posts: dict = field(default_factory=dict)
    lid_post: np.ndarray = None
    lid_post_tensor: object = None
    expert_hidden: tuple = None
    gate: np.ndarray = None


@dataclass
class ForwardOutput:
    losses: LossBreakdown
    taps: EncoderTapOutputs
    log_post: nx.Tensor


# -- objectives --------------------------------------------------------

def total_loss_dmoe(mix, lang_a, lang_b, dis, lam):
    """0.5 * (L_mix + L_lang) + lam * L_dis, with L_lang the mean of both experts."""
    return (mix + (lang_a + lang_b) * 0.5) * 0.5 + dis * lam


def total_loss_proposed(mix, lang_a, lang_b, inter_lid, inter_gt, dis, lam):
    """[L_mix + (L_lang + L_inter) / 2] / 2 + lam * L_dis."""
    lang = (lang_a + lang_b) * 0.5
    inter = (inter_lid + inter_gt) * 0.5
    return (mix + (lang + inter) * 0.5) * 0.5 + dis * lam


# -- building blocks ---------------------------------------------------

def linear(x, params, name):
    return nx.matmul(x, params[name + ".w"]) + params[name + ".b"]


def encoder_block_forward(x, mask, params, prefix, heads, dropout=0.0, rng=None):
    """Pre-norm transformer block: x + MHA(LN(x)), then x + FF(LN(x))."""
    if x.shape[-1] != params[prefix + "attn_q.w"].shape[0]:
        raise nx.ShapeError(f"block {prefix} expects dim {params[prefix + 'attn_q.w'].shape[0]}, got {x.shape[-1]}")
    h = nx.layernorm(x, params[prefix + "ln1.g"], params[prefix + "ln1.b"])
    q = linear(h, params, prefix + "attn_q")
    k = linear(h, params, prefix + "attn_k")
    v = linear(h, params, prefix + "attn_v")
    a = nx.attention(q, k, v, mask, heads)
    x = x + nx.dropout(linear(a, params, prefix + "attn_o"), dropout, rng)
    h = nx.layernorm(x, params[prefix + "ln2.g"], params[prefix + "ln2.b"])
    f = linear(nx.relu(linear(h, params, prefix + "ff1")), params, prefix + "ff2")
    return x + nx.dropout(f, dropout, rng)


def ctc_head(x, params, name):
    """LayerNorm, projection to the head's vocabulary, log-softmax."""
    h = nx.layernorm(x, params[name + ".ln.g"], params[name + ".ln.b"])
    return nx.log_softmax(linear(h, params, name), axis=-1)


def intermediate_ctc(tap_hidden, params, name, lengths, targets, npc, alpha):
    """Head at an encoder tap: returns (per-utterance loss, log posteriorgram)."""
    log_post = ctc_head(tap_hidden, params, name)
    loss = None
    if targets is not None:
        loss = npc_loss_batch(log_post, lengths, targets, npc, alpha=alpha)
    return loss, log_post


def self_condition_inject(hidden, post, weight):
    """hidden + post @ weight, with ``weight`` a (|V'|, dim) matrix."""
    if post.shape[-1] != weight.shape[0]:
        raise nx.ShapeError(f"posteriors have {post.shape[-1]} columns, projection expects {weight.shape[0]}")
    return hidden + nx.matmul(post, weight)


def posterior_inject(shared_out, lid_post, w_a, w_b, enabled=True):
    if not enabled:
        return shared_out, shared_out
    return self_condition_inject(shared_out, lid_post, w_a), self_condition_inject(shared_out, lid_post, w_b)


def moe_combine(h_a, h_b, gate_w, gate_b):
    """Per-frame two-way softmax gate over the concatenated expert outputs."""
    if h_a.shape != h_b.shape:
        raise nx.ShapeError("expert outputs differ in shape")
    g = nx.softmax(nx.matmul(nx.concat([h_a, h_b], axis=-1), gate_w) + gate_b, axis=-1)
    combined = h_a * g[..., 0:1] + h_b * g[..., 1:2]
    return combined, g


def disentangle_loss(h_a, h_b, mask, squared=True):
    """Per-utterance mean over valid frames of cos(h_a, h_b) (squared by default).

    Frames where either vector has zero norm contribute 0.
    """
    h_a, h_b = nx._as_tensor(h_a), nx._as_tensor(h_b)
    a, b = h_a.data, h_b.data
    mask = np.asarray(mask, dtype=np.float64)
    if a.ndim == 2:
        a, b, mask = a[None], b[None], mask[None]
    counts = mask.sum(axis=1)
    if np.any(counts < 1):
        raise ValueError("disentangle_loss needs at least one unmasked frame per utterance")
    na = np.linalg.norm(a, axis=-1)
    nb = np.linalg.norm(b, axis=-1)
    denom = na * nb
    ok = denom > 1e-12
    safe = np.where(ok, denom, 1.0)
    cos = np.where(ok, (a * b).sum(axis=-1) / safe, 0.0)
    val = cos * cos if squared else cos
    weight = mask / counts[:, None]
    out = (val * weight).sum(axis=1)

    def backward(g):
        dval = (2.0 * cos if squared else np.ones_like(cos)) * weight * g[:, None] * ok
        inv = 1.0 / safe
        na2 = np.where(ok, na * na, 1.0)
        nb2 = np.where(ok, nb * nb, 1.0)
        ga = dval[..., None] * (b * inv[..., None] - cos[..., None] * a / na2[..., None])
        gb = dval[..., None] * (a * inv[..., None] - cos[..., None] * b / nb2[..., None])
        return ga.reshape(h_a.shape), gb.reshape(h_b.shape)

    if h_a.ndim == 2:
        return nx.reshape(nx._node(out, (h_a, h_b), backward, "disentangle"), ())
    return nx._node(out, (h_a, h_b), backward, "disentangle")


_PE_CACHE = {}


def positional_encoding(T, dim):
    key = dim
    table = _PE_CACHE.get(key)
    if table is None or table.shape[0] < T:
        n = max(T, 512)
        pos = np.arange(n)[:, None]
        rate = np.exp(-math.log(10000.0) * (np.arange(0, dim, 2) / dim))
        table = np.zeros((n, dim))
        table[:, 0::2] = np.sin(pos * rate)
        table[:, 1::2] = np.cos(pos * rate[: dim // 2])
        _PE_CACHE[key] = table
    return table[:T]


# -- the model ---------------------------------------------------------

class CodeSwitchEncoder:
    """Parameters plus forward pass for every variant in ``VARIANTS``."""

    def __init__(self, config, seed=0, params=None):
        self.config = config
        if params is None:
            params = self._init_params(np.random.default_rng(seed))
        self.params = params

    # parameters -------------------------------------------------------
    def _init_params(self, rng):
        c = self.config
        p = {}

        def lin(name, fan_in, fan_out, zero=False):
            w = np.zeros((fan_in, fan_out)) if zero else nx.uniform_init(rng, fan_in, (fan_in, fan_out))
            p[name + ".w"] = nx.parameter(w)
            p[name + ".b"] = nx.parameter(np.zeros(fan_out))

        def norm(name):
            p[name + ".g"] = nx.parameter(np.ones(c.dim))
            p[name + ".b"] = nx.parameter(np.zeros(c.dim))

        def block(prefix):
            norm(prefix + "ln1")
            for part in ("q", "k", "v", "o"):
                lin(prefix + "attn_" + part, c.dim, c.dim)
            norm(prefix + "ln2")
            lin(prefix + "ff1", c.dim, c.ff_dim)
            lin(prefix + "ff2", c.ff_dim, c.dim)

        def head(name, n_out):
            norm(name + ".ln")
            lin(name, c.dim, n_out)

        V = c.n_vocab
        lin("input", c.input_dim, c.dim)
        taps = c.tap_targets()
        if c.variant in SINGLE_STACK:
            for i in range(1, c.n_blocks + 1):
                block(f"enc.{i}.")
        else:
            for i in range(1, c.shared_blocks + 1):
                block(f"shared.{i}.")
            for lang in ("a", "b"):
                for i in range(1, c.expert_blocks + 1):
                    block(f"expert_{lang}.{i}.")
                head(f"head_lang_{lang}", V)
            lin("gate", 2 * c.dim, 2)
            if c.variant == PROPOSED and c.posterior_injection:
                p["inject_a.w"] = nx.parameter(np.zeros((3, c.dim)))
                p["inject_b.w"] = nx.parameter(np.zeros((3, c.dim)))
        for layer, kind in sorted(taps.items()):
            n_out = 3 if kind == "lid" else V
            head(f"tap.{layer}", n_out)
            if c.condition:
                p[f"cond.{layer}.w"] = nx.parameter(np.zeros((n_out, c.dim)))
        head("head_mix", V)
        return p

    def named_parameters(self):
        return sorted(self.params.items())

    def num_parameters(self):
        return sum(t.size for t in self.params.values())

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    def state_dict(self):
        return {k: t.data.copy() for k, t in self.params.items()}

    def load_state_dict(self, state):
        if set(state) != set(self.params):
            missing = set(self.params) ^ set(state)
            raise ValueError(f"parameter names differ: {sorted(missing)[:5]}")
        for k, v in state.items():
            if v.shape != self.params[k].shape:
                raise ValueError(f"shape mismatch for {k}: {v.shape} vs {self.params[k].shape}")
            self.params[k] = nx.parameter(v)

    # forward ----------------------------------------------------------
    def _run_taps(self, x, layer, lengths, mask, batch, losses, taps_out, targets_kind):
        """Apply the intermediate head at ``layer`` if one is configured."""
        c = self.config
        kind = targets_kind.get(layer)
        if kind is None:
            return x
        npc = c.npc()
        if kind == "lid":
            targets = batch.lid
        else:
            targets = batch.mixed
        loss, log_post = intermediate_ctc(x, self.params, f"tap.{layer}", lengths, targets, npc, npc.alpha_for(kind))
        post = nx.exp(log_post)
        taps_out.tap_hidden[layer] = x
        taps_out.tap_posts[layer] = post.data
        if kind == "lid" and (taps_out.lid_post is None or layer == c.lid_tap):
            taps_out.lid_post_tensor = post
            taps_out.lid_post = post.data
        if loss is not None:
            losses.taps[layer] = loss
        if c.condition and layer not in c.no_condition_taps:
            x = self_condition_inject(x, post, self.params[f"cond.{layer}.w"])
        return x

    def forward(self, batch, mode="train", rng=None):
        c = self.config
        p = self.params
        training = mode == "train"
        drop = c.dropout if training else 0.0
        mask, lengths = batch.mask, batch.lengths
        have_targets = batch.mixed is not None
        taps_kind = c.tap_targets()
        npc = c.npc()

        x = linear(nx.Tensor(batch.features), p, "input")
        x = x + positional_encoding(x.shape[1], c.dim)[None]

        formula = {BASELINE: "ctc", DMOE: "dmoe", PROPOSED: "proposed"}.get(c.variant, "interctc")
        losses = LossBreakdown(formula, lambda_dis=c.lambda_dis)
        taps_out = EncoderTapOutputs()

        if c.variant in SINGLE_STACK:
            for i in range(1, c.n_blocks + 1):
                x = encoder_block_forward(x, mask, p, f"enc.{i}.", c.heads, drop, rng)
                if i < c.n_blocks:
                    x = self._run_taps(x, i, lengths, mask, batch, losses, taps_out, taps_kind)
            top = x
        else:
            for i in range(1, c.shared_blocks + 1):
                x = encoder_block_forward(x, mask, p, f"shared.{i}.", c.heads, drop, rng)
                x = self._run_taps(x, i, lengths, mask, batch, losses, taps_out, taps_kind)
            inject = c.variant == PROPOSED and c.posterior_injection
            if inject:
                in_a, in_b = posterior_inject(x, taps_out.lid_post_tensor, p["inject_a.w"], p["inject_b.w"])
            else:
                in_a = in_b = x
            h_a, h_b = in_a, in_b
            for i in range(1, c.expert_blocks + 1):
                h_a = encoder_block_forward(h_a, mask, p, f"expert_a.{i}.", c.heads, drop, rng)
                h_b = encoder_block_forward(h_b, mask, p, f"expert_b.{i}.", c.heads, drop, rng)
            taps_out.expert_hidden = (h_a, h_b)
            top, gate = moe_combine(h_a, h_b, p["gate.w"], p["gate.b"])
            taps_out.gate = gate.data
            if have_targets:
                alpha_lang = npc.alpha_for("lang")
                lp_a = ctc_head(h_a, p, "head_lang_a")
                lp_b = ctc_head(h_b, p, "head_lang_b")
                losses.lang_a = npc_loss_batch(lp_a, lengths, batch.lat_a, npc, alpha=alpha_lang)
                losses.lang_b = npc_loss_batch(lp_b, lengths, batch.lat_b, npc, alpha=alpha_lang)
                losses.disentangle = disentangle_loss(h_a, h_b, mask, squared=c.disentangle == "squared")

        taps_out.final_hidden = top
        log_post = ctc_head(top, p, "head_mix")
        if have_targets:
            losses.mix = npc_loss_batch(log_post, lengths, batch.mixed, npc, alpha=npc.alpha_for("mix"))
            self._finish_losses(losses, taps_kind)
        return ForwardOutput(losses, taps_out, log_post)

    def _finish_losses(self, losses, taps_kind):
        c = self.config
        lid = [losses.taps[t] for t in sorted(losses.taps) if taps_kind[t] == "lid"]
        gt = [losses.taps[t] for t in sorted(losses.taps) if taps_kind[t] == "gt"]
        losses.inter_lid = _mean_of(lid)
        losses.inter_gt = _mean_of(gt)
        if losses.formula == "ctc":
            losses.total = losses.mix
        elif losses.formula == "interctc":
            inter = _mean_of([losses.taps[t] for t in sorted(losses.taps)])
            losses.total = (losses.mix + inter) * 0.5
        elif losses.formula == "dmoe":
            losses.total = total_loss_dmoe(losses.mix, losses.lang_a, losses.lang_b, losses.disentangle, c.lambda_dis)
        else:
            losses.total = total_loss_proposed(losses.mix, losses.lang_a, losses.lang_b, losses.inter_lid,
                                               losses.inter_gt, losses.disentangle, c.lambda_dis)


def _mean_of(tensors):
    if not tensors:
        return None
    acc = tensors[0]
    for t in tensors[1:]:
        acc = acc + t
    return acc * (1.0 / len(tensors))


# -- checkpoints -------------------------------------------------------

def save_model(path, model, meta=None, arrays=None):
    """Write an .npz container: parameters, optional extra arrays, JSON metadata.

    Parameters are stored as ``param/<name>``; extra arrays (optimizer
    moments) under their given keys; ``__meta__`` holds the model config,
    format version and caller metadata. Written to a temp file then renamed.
    """
    record = {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION, "config": model.config.to_dict()}
    record.update(meta or {})
    payload = {f"param/{k}": t.data for k, t in model.params.items()}
    payload.update(arrays or {})
    payload["__meta__"] = np.frombuffer(json.dumps(record, sort_keys=True).encode(), dtype=np.uint8)
    buf = io.BytesIO()
    np.savez(buf, **payload)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(buf.getvalue())
    os.replace(tmp, path)


def read_checkpoint(path):
    """Returns (meta dict, params dict, extra arrays dict)."""
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(bytes(z["__meta__"]).decode())
        if meta.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path} is not a {CHECKPOINT_FORMAT} file")
        params, extra = {}, {}
        for key in z.files:
            if key == "__meta__":
                continue
            if key.startswith("param/"):
                params[key[len("param/"):]] = z[key].copy()
            else:
                extra[key] = z[key].copy()
    return meta, params, extra


def load_model(path):
    meta, params, _ = read_checkpoint(path)
    config = ModelConfig.from_dict(meta["config"])
    model = CodeSwitchEncoder(config, params={k: nx.parameter(v) for k, v in params.items()})
    return model, meta
