import numpy as np
import pytest

from lattice_lid import model as md
from lattice_lid import numerics as nx
from lattice_lid.corpus import CorpusSpec, generate_corpus
from lattice_lid.ctc import Vocabulary

SPEC = CorpusSpec(vocab_a=4, vocab_b=4, feature_dim=5, min_tokens=2, max_tokens=4,
                  min_duration=2, max_duration=3, seed=11)


def tiny_config(variant, **kw):
    base = dict(variant=variant, input_dim=5, vocab_a=4, vocab_b=4, dim=8, ff_dim=16, heads=2,
                n_blocks=3, taps=(1, 2), shared_blocks=2, expert_blocks=1, lid_tap=1, gt_tap=2)
    base.update(kw)
    return md.ModelConfig(**base)


@pytest.fixture(scope="module")
def utts():
    return generate_corpus(SPEC, 6)


def randomize_zero_params(model, seed=0):
    rng = np.random.default_rng(seed)
    for name, t in model.params.items():
        if name.startswith(("cond.", "inject_")):
            t.data[...] = rng.normal(scale=0.3, size=t.shape)


class TestConfig:
    def test_defaults_are_desk_sized(self):
        c = md.ModelConfig()
        assert (c.dim, c.ff_dim, c.heads, c.shared_blocks, c.expert_blocks) == (32, 64, 2, 4, 2)
        assert (c.lid_tap, c.gt_tap) == (2, 3)

    @pytest.mark.parametrize(
        "kw",
        [dict(variant="nope"), dict(dim=10, heads=3), dict(alpha=-1.0), dict(lid_tap=3, gt_tap=3),
         dict(variant="scctc", taps=(0, 2)), dict(variant="scctc", taps=(3,)),
         dict(variant="scctc_lid3", taps=(1, 2), lid_tap=3, n_blocks=4),
         dict(gt_tap=5), dict(disentangle="l2")],
    )
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            tiny_config(kw.pop("variant", "proposed"), **kw)

    def test_round_trip(self):
        c = tiny_config("scctc_lid3", taps=(1, 2), lid_tap=2, alpha_overrides={"lid": 0.1})
        assert md.ModelConfig.from_dict(c.to_dict()) == c

    def test_unknown_key(self):
        with pytest.raises(ValueError, match="bogus"):
            md.ModelConfig.from_dict({"bogus": 1})

    @pytest.mark.parametrize(
        "variant,expected",
        [("baseline", {}), ("scctc", {1: "gt", 2: "gt"}), ("scctc_lidall", {1: "lid", 2: "lid"}),
         ("scctc_lid3", {1: "lid", 2: "gt"}), ("dmoe", {}), ("proposed", {1: "lid", 2: "gt"})],
    )
    def test_tap_targets(self, variant, expected):
        assert tiny_config(variant).tap_targets() == expected


class TestBatch:
    def test_padding_and_targets(self, utts):
        b = md.make_batch(utts[:3])
        T = max(u.n_frames for u in utts[:3])
        assert b.features.shape == (3, T, 5)
        for i, u in enumerate(utts[:3]):
            assert b.mask[i].sum() == u.n_frames
            np.testing.assert_array_equal(b.features[i, u.n_frames:], 0.0)
            assert b.lid[i] == [1 if l == "A" else 2 for l in u.langs]
            assert b.mixed[i] == u.tokens

    def test_without_targets(self, utts):
        b = md.make_batch(utts[:2], with_targets=False)
        assert b.mixed is None and b.lid is None


class TestBuildingBlocks:
    @pytest.mark.parametrize("seed", range(10))
    def test_gate_sums_to_one(self, seed):
        rng = np.random.default_rng(seed)
        h_a, h_b = rng.normal(size=(2, 3, 4, 8)) * 3
        _, g = md.moe_combine(nx.Tensor(h_a), nx.Tensor(h_b), rng.normal(size=(16, 2)) * 2, rng.normal(size=2))
        assert np.max(np.abs(g.data.sum(axis=-1) - 1.0)) <= 1e-12
        assert np.all(g.data >= 0)

    def test_gate_identical_experts(self):
        h = nx.Tensor(np.random.default_rng(0).normal(size=(1, 3, 4)))
        out, _ = md.moe_combine(h, h, np.random.default_rng(1).normal(size=(8, 2)), np.zeros(2))
        np.testing.assert_allclose(out.data, h.data, atol=1e-12)

    def test_gate_shape_mismatch(self):
        with pytest.raises(nx.ShapeError):
            md.moe_combine(nx.Tensor(np.ones((1, 2, 4))), nx.Tensor(np.ones((1, 3, 4))), np.ones((8, 2)), np.zeros(2))

    @pytest.mark.parametrize(
        "a,b,squared,expected",
        [([1.0, 0.0], [0.0, 1.0], True, 0.0), ([1.0, 2.0], [2.0, 4.0], True, 1.0),
         ([1.0, 0.0], [-3.0, 0.0], True, 1.0), ([1.0, 0.0], [-3.0, 0.0], False, -1.0),
         ([1.0, 1.0], [1.0, 0.0], True, 0.5), ([0.0, 0.0], [1.0, 0.0], True, 0.0)],
    )
    def test_disentangle_cases(self, a, b, squared, expected):
        val = md.disentangle_loss(np.array([a]), np.array([b]), np.ones(1), squared=squared)
        assert val.item() == pytest.approx(expected, abs=1e-12)

    def test_disentangle_ignores_padding(self):
        rng = np.random.default_rng(2)
        a, b = rng.normal(size=(2, 1, 5, 3))
        mask = np.array([[True, True, True, False, False]])
        full = md.disentangle_loss(a, b, mask).item()
        trimmed = md.disentangle_loss(a[:, :3], b[:, :3], np.ones((1, 3))).item()
        assert full == pytest.approx(trimmed, abs=1e-15)

    def test_disentangle_needs_frames(self):
        with pytest.raises(ValueError):
            md.disentangle_loss(np.ones((1, 2, 2)), np.ones((1, 2, 2)), np.zeros((1, 2)))

    @pytest.mark.parametrize("squared", [True, False])
    @pytest.mark.parametrize("seed", range(10))
    def test_disentangle_gradient(self, seed, squared):
        rng = np.random.default_rng(seed)
        a, b = rng.normal(size=(2, 2, 4, 3))
        mask = np.array([[True] * 4, [True, True, False, False]])

        def f(x, y):
            return float(md.disentangle_loss(x, y, mask, squared).data.sum())

        pa, pb = nx.parameter(a), nx.parameter(b)
        md.disentangle_loss(pa, pb, mask, squared).sum().backward()
        for p, fd in ((pa, nx.finite_difference_grad(lambda x: f(x, b), a)),
                      (pb, nx.finite_difference_grad(lambda y: f(a, y), b))):
            assert np.max(np.abs(p.grad - fd)) / np.max(np.abs(fd)) <= 1e-6

    def test_self_condition_zero_weight_is_identity(self):
        h = nx.Tensor(np.random.default_rng(0).normal(size=(1, 4, 8)))
        post = nx.Tensor(np.full((1, 4, 3), 1 / 3))
        np.testing.assert_array_equal(md.self_condition_inject(h, post, np.zeros((3, 8))).data, h.data)

    def test_self_condition_adds_projection(self):
        h = nx.Tensor(np.zeros((1, 1, 2)))
        post = nx.Tensor(np.array([[[0.25, 0.75]]]))
        w = np.array([[4.0, 0.0], [0.0, 4.0]])
        np.testing.assert_allclose(md.self_condition_inject(h, post, w).data, [[[1.0, 3.0]]])

    def test_self_condition_shape(self):
        with pytest.raises(nx.ShapeError):
            md.self_condition_inject(nx.Tensor(np.zeros((1, 1, 2))), nx.Tensor(np.ones((1, 1, 3))), np.ones((2, 2)))

    def test_posterior_inject_disabled(self):
        h = nx.Tensor(np.ones((1, 2, 4)))
        a, b = md.posterior_inject(h, None, None, None, enabled=False)
        assert a is h and b is h

    def test_block_ignores_padding(self):
        model = md.CodeSwitchEncoder(tiny_config("baseline"), seed=0)
        rng = np.random.default_rng(0)
        x = rng.normal(size=(1, 6, 8))
        mask = np.array([[True] * 4 + [False] * 2])
        noisy = x.copy()
        noisy[0, 4:] = rng.normal(size=(2, 8)) * 10
        a = md.encoder_block_forward(nx.Tensor(x), mask, model.params, "enc.1.", 2).data
        b = md.encoder_block_forward(nx.Tensor(noisy), mask, model.params, "enc.1.", 2).data
        trimmed = md.encoder_block_forward(nx.Tensor(x[:, :4]), mask[:, :4], model.params, "enc.1.", 2).data
        np.testing.assert_allclose(a[:, :4], b[:, :4], atol=1e-12)
        np.testing.assert_allclose(a[:, :4], trimmed, atol=1e-12)

    def test_block_dim_mismatch(self):
        model = md.CodeSwitchEncoder(tiny_config("baseline"), seed=0)
        with pytest.raises(nx.ShapeError):
            md.encoder_block_forward(nx.Tensor(np.ones((1, 2, 4))), np.ones((1, 2), bool), model.params, "enc.1.", 2)

    def test_positional_encoding(self):
        pe = md.positional_encoding(5, 8)
        np.testing.assert_array_equal(pe[0, 0::2], 0.0)
        np.testing.assert_array_equal(pe[0, 1::2], 1.0)
        assert pe.shape == (5, 8)


class TestObjectives:
    def test_dmoe_formula(self):
        assert md.total_loss_dmoe(2.0, 4.0, 8.0, 0.5, 10.0) == pytest.approx(0.5 * (2 + 6) + 5.0)

    def test_proposed_formula(self):
        # lang = 6, inter = 2, (2 + (6 + 2) / 2) / 2 = 3
        assert md.total_loss_proposed(2.0, 4.0, 8.0, 1.0, 3.0, 0.5, 10.0) == pytest.approx(3.0 + 5.0)

    def test_proposed_reduces_to_dmoe_when_inter_equals_lang(self):
        a = md.total_loss_proposed(1.5, 2.0, 4.0, 2.0, 4.0, 0.2, 3.0)
        assert a == pytest.approx(md.total_loss_dmoe(1.5, 2.0, 4.0, 0.2, 3.0))


@pytest.mark.parametrize("variant", md.VARIANTS)
class TestForward:
    def test_losses_finite_and_total_consistent(self, variant, utts):
        model = md.CodeSwitchEncoder(tiny_config(variant), seed=1)
        out = model.forward(md.make_batch(utts))
        L = out.losses
        assert np.all(np.isfinite(L.total.data))
        np.testing.assert_allclose(L.recompute_total(), L.total.data, atol=1e-12)
        assert L.total.shape == (len(utts),)
        np.testing.assert_allclose(np.exp(out.log_post.data).sum(-1), 1.0, atol=1e-12)

    def test_padding_invariance(self, variant, utts):
        model = md.CodeSwitchEncoder(tiny_config(variant), seed=2)
        randomize_zero_params(model)
        batch_out = model.forward(md.make_batch(utts)).losses.per_utterance()
        for i, u in enumerate(utts):
            alone = model.forward(md.make_batch([u])).losses.per_utterance()
            for key, val in alone.items():
                assert abs(val[0] - batch_out[key][i]) <= 1e-5, key

    def test_inference_mode_without_targets(self, variant, utts):
        model = md.CodeSwitchEncoder(tiny_config(variant), seed=1)
        out = model.forward(md.make_batch(utts, with_targets=False), mode="eval")
        assert out.losses.total is None
        if variant in ("proposed", "scctc_lid3", "scctc_lidall"):
            assert out.taps.lid_post.shape[-1] == 3

    def test_checkpoint_round_trip(self, variant, utts, tmp_path):
        model = md.CodeSwitchEncoder(tiny_config(variant), seed=3)
        path = tmp_path / "m.npz"
        md.save_model(path, model, meta={"epoch": 4}, arrays={"adam/m/x": np.arange(3.0)})
        loaded, meta = md.load_model(path)
        assert meta["epoch"] == 4 and meta["format"] == md.CHECKPOINT_FORMAT
        assert loaded.config == model.config
        b = md.make_batch(utts)
        np.testing.assert_array_equal(loaded.forward(b).losses.total.data, model.forward(b).losses.total.data)
        _, _, extra = md.read_checkpoint(path)
        np.testing.assert_array_equal(extra["adam/m/x"], np.arange(3.0))


def copy_shared(src, dst):
    for name, t in src.params.items():
        if name in dst.params:
            dst.params[name].data[...] = t.data


class TestReductions:
    def test_proposed_equals_dmoe_at_zero_init(self, utts):
        dmoe = md.CodeSwitchEncoder(tiny_config("dmoe"), seed=5)
        prop = md.CodeSwitchEncoder(tiny_config("proposed"), seed=6)
        copy_shared(dmoe, prop)
        b = md.make_batch(utts)
        a, p = dmoe.forward(b), prop.forward(b)
        np.testing.assert_allclose(p.log_post.data, a.log_post.data, atol=1e-12)
        np.testing.assert_allclose(p.losses.mix.data, a.losses.mix.data, atol=1e-12)
        np.testing.assert_allclose(p.losses.disentangle.data, a.losses.disentangle.data, atol=1e-12)

    def test_injection_changes_output_once_trained(self, utts):
        prop = md.CodeSwitchEncoder(tiny_config("proposed", condition=False), seed=6)
        b = md.make_batch(utts)
        before = prop.forward(b).log_post.data
        prop.params["inject_a.w"].data[...] = 1.0
        assert not np.allclose(prop.forward(b).log_post.data, before)

    @pytest.mark.parametrize("variant", ["scctc", "scctc_lid3", "scctc_lidall"])
    def test_unconditioned_taps_leave_final_output(self, variant, utts):
        base = md.CodeSwitchEncoder(tiny_config("baseline"), seed=7)
        sc = md.CodeSwitchEncoder(tiny_config(variant, condition=False), seed=8)
        copy_shared(base, sc)
        b = md.make_batch(utts)
        np.testing.assert_allclose(sc.forward(b).log_post.data, base.forward(b).log_post.data, atol=1e-12)

    def test_interctc_total(self, utts):
        model = md.CodeSwitchEncoder(tiny_config("scctc"), seed=1)
        L = model.forward(md.make_batch(utts)).losses
        expected = 0.5 * (L.mix.data + 0.5 * (L.taps[1].data + L.taps[2].data))
        np.testing.assert_allclose(L.total.data, expected, atol=1e-12)

    def test_lid_targets_only_at_lid_taps(self, utts):
        model = md.CodeSwitchEncoder(tiny_config("scctc_lid3", lid_tap=2), seed=1)
        out = model.forward(md.make_batch(utts))
        assert out.taps.tap_posts[2].shape[-1] == 3
        assert out.taps.tap_posts[1].shape[-1] == tiny_config("scctc").n_vocab

    def test_parameter_count_desk(self):
        assert md.CodeSwitchEncoder(md.ModelConfig(), seed=0).num_parameters() == 76949


def flat_params(model):
    names = sorted(model.params)
    return names, np.concatenate([model.params[n].data.ravel() for n in names])


def set_flat(model, names, vec):
    off = 0
    for n in names:
        t = model.params[n]
        t.data[...] = vec[off: off + t.size].reshape(t.shape)
        off += t.size


@pytest.mark.parametrize("backprop_prior,alpha", [(True, 0.3), (False, 0.0)])
def test_full_objective_gradient(utts, backprop_prior, alpha):
    """Whole-model gradient against central differences on a dim-8 model."""
    cfg = tiny_config("proposed", alpha=alpha, backprop_through_prior=backprop_prior, lambda_dis=2.0)
    model = md.CodeSwitchEncoder(cfg, seed=4)
    randomize_zero_params(model, seed=1)
    batch = md.make_batch(utts[:2])
    model.zero_grad()
    model.forward(batch).losses.objective.backward()
    names, x0 = flat_params(model)
    analytic = np.concatenate([
        (model.params[n].grad if model.params[n].grad is not None else np.zeros(model.params[n].shape)).ravel()
        for n in names])

    def f(vec):
        set_flat(model, names, vec)
        return model.forward(batch).losses.objective.item()

    fd = nx.finite_difference_grad(f, x0.copy(), 1e-5)
    set_flat(model, names, x0)
    assert np.max(np.abs(analytic - fd)) / np.max(np.abs(fd)) <= 1e-4
    assert Vocabulary.OTHER == 1
