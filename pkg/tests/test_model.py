import numpy as np
import pytest

from tsal360 import geometry, metrics
from tsal360 import model as M
from tsal360 import tensor as tt
from tsal360.encoders import EncoderConfig
from tsal360.model import ModelConfig, TextSaliencyModel, TrainingSample

from conftest import TINY_ENCODER, TINY_MODEL


def make_weights(c, key_dim, f, t, heads, rng, dtype=np.float64):
    def w(shape):
        return tt.Tensor(rng.standard_normal(shape).astype(dtype) * 0.3, requires_grad=True)

    def attn(kd):
        return M.AttentionWeights(
            wq=w((c, c)), wk=w((kd, c)), wv=w((kd, c)), wo=w((c, c)),
            ln_gain=tt.Tensor(np.ones(c, dtype)), ln_bias=tt.Tensor(np.zeros(c, dtype)),
        )

    return M.ScaleWeights(
        temporal=attn(c),
        spatial=attn(c),
        cross=attn(key_dim),
        ffn=M.FfnWeights(
            w1=w((c, 4 * c)), b1=tt.Tensor(np.zeros(4 * c, dtype)),
            w2=w((4 * c, c)), b2=tt.Tensor(np.zeros(c, dtype)),
            ln_gain=tt.Tensor(np.ones(c, dtype)), ln_bias=tt.Tensor(np.zeros(c, dtype)),
        ),
        pos_time=w((f, c)),
        pos_sphere=w((t, c)),
    )


def loop_layer_norm(x, eps=1e-5):
    mu = x.mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(x.var(-1, keepdims=True) + eps)


def loop_mha(x, w, heads):
    """Brute-force multi-head self-attention over axis 0 of (N, C), float64."""
    n, c = x.shape
    d = c // heads
    q = x @ w.wq.data
    k = x @ w.wk.data
    v = x @ w.wv.data
    out = np.zeros((n, c))
    for h in range(heads):
        sl = slice(h * d, (h + 1) * d)
        scores = q[:, sl] @ k[:, sl].T / np.sqrt(d)
        e = np.exp(scores - scores.max(-1, keepdims=True))
        a = e / e.sum(-1, keepdims=True)
        out[:, sl] = a @ v[:, sl]
    return out @ w.wo.data


def loop_cross(x, text, w, heads):
    n, c = x.shape
    d = c // heads
    q = x @ w.wq.data
    k = text @ w.wk.data
    v = text @ w.wv.data
    out = np.zeros((n, c))
    for h in range(heads):
        sl = slice(h * d, (h + 1) * d)
        scores = q[:, sl] @ k[:, sl].T / np.sqrt(d)
        e = np.exp(scores - scores.max(-1, keepdims=True))
        a = e / e.sum(-1, keepdims=True)
        out[:, sl] = a @ v[:, sl]
    return out @ w.wo.data


class TestSimEst:
    def test_parallel_orthogonal_and_scale_invariance(self):
        vg = np.zeros((1, 3, 4), np.float32)
        tg = np.array([[1.0, 0, 0, 0]], np.float32)
        vg[0, 0] = [2.0, 0, 0, 0]       # same direction
        vg[0, 1] = [0, 5.0, 0, 0]       # orthogonal
        vg[0, 2] = [-1.0, 0, 0, 0]      # opposite
        s = M.sim_est(vg, tg)
        assert np.allclose(s[0], [1.0, 0.0, -1.0], atol=1e-6)
        assert np.allclose(M.sim_est(vg * 7.5, tg * 0.3), s, atol=1e-6)

    def test_zero_norm_raises(self):
        vg = np.ones((1, 2, 4), np.float32)
        vg[0, 1] = 0.0
        with pytest.raises(ValueError, match="zero-norm"):
            M.sim_est(vg, np.ones((1, 4), np.float32))

    def test_range_is_clamped(self):
        rng = np.random.default_rng(0)
        s = M.sim_est(rng.standard_normal((4, 6, 32)), rng.standard_normal((1, 32)))
        assert s.min() >= -1.0 and s.max() <= 1.0


class TestRelevanceAndPooling:
    def test_apply_relevance_identity_zero_and_loop(self):
        rng = np.random.default_rng(1)
        vl = [rng.standard_normal((2, 3, 4, 2, 2)).astype(np.float32) for _ in range(3)]
        ones = np.ones((2, 3), np.float32)
        for a, b in zip(M.apply_relevance(vl, ones), vl):
            assert np.array_equal(a, b)
        s = rng.standard_normal((2, 3)).astype(np.float32)
        s[1, 2] = 0.0
        weighted = M.apply_relevance(vl, s)
        assert not weighted[0][1, 2].any()
        for m in range(3):
            expect = np.empty_like(vl[m])
            for f in range(2):
                for t in range(3):
                    expect[f, t] = vl[m][f, t] * s[f, t]
            assert np.allclose(weighted[m], expect, atol=1e-6)

    def test_clamp_relevance_drops_negatives(self):
        vl = [np.ones((1, 2, 1, 1, 1), np.float32)]
        s = np.array([[-0.5, 0.5]], np.float32)
        assert M.apply_relevance(vl, s, clamp=True)[0][0, 0, 0, 0, 0] == 0.0
        assert M.apply_relevance(vl, s, clamp=False)[0][0, 0, 0, 0, 0] == -0.5

    def test_downsample_constant_and_loop(self):
        const = np.full((1, 2, 3, 4, 4), 0.75, np.float32)
        assert np.allclose(M.downsample([const])[0], 0.75)
        rng = np.random.default_rng(2)
        v = rng.standard_normal((2, 3, 5, 4, 6)).astype(np.float32)
        out = M.downsample([v])[0]
        for f in range(2):
            for t in range(3):
                for c in range(5):
                    assert abs(out[f, t, c] - v[f, t, c].mean()) < 1e-6

    def test_downsample_full_scale_shape(self):
        v = np.zeros((8, 18, 512, 28, 28), np.float32)
        assert M.downsample([v])[0].shape == (8, 18, 512)


class TestAttentionBlocks:
    def test_temporal_single_frame_is_value_path(self):
        # F=1: the softmax is a singleton, so output = x + (LN(x) Wv) Wo
        rng = np.random.default_rng(3)
        w = make_weights(c=8, key_dim=8, f=1, t=3, heads=2, rng=rng)
        v = tt.Tensor(rng.standard_normal((1, 3, 8)))
        out = M.temporal_attention(v, w, heads=2)
        x = v.data + w.pos_time.data[:, None, :]
        expect = x + (loop_layer_norm(x) @ w.temporal.wv.data) @ w.temporal.wo.data
        assert np.allclose(out.data, expect, atol=1e-10)

    def test_temporal_is_equivariant_to_viewport_permutation(self):
        rng = np.random.default_rng(4)
        w = make_weights(c=8, key_dim=8, f=3, t=4, heads=2, rng=rng)
        v = rng.standard_normal((3, 4, 8))
        perm = np.array([2, 0, 3, 1])
        out = M.temporal_attention(tt.Tensor(v), w, heads=2).data
        out_p = M.temporal_attention(tt.Tensor(v[:, perm]), w, heads=2).data
        assert np.allclose(out[:, perm], out_p, atol=1e-10)

    def test_temporal_matches_loop_oracle(self):
        rng = np.random.default_rng(5)
        w = make_weights(c=8, key_dim=8, f=3, t=2, heads=2, rng=rng)
        v = rng.standard_normal((3, 2, 8))
        out = M.temporal_attention(tt.Tensor(v), w, heads=2).data
        x = v + w.pos_time.data[:, None, :]
        for t in range(2):
            expect = x[:, t] + loop_mha(loop_layer_norm(x[:, t]), w.temporal, 2)
            assert np.allclose(out[:, t], expect, atol=1e-9)

    def test_spatial_matches_loop_oracle_and_frame_permutation(self):
        rng = np.random.default_rng(6)
        w = make_weights(c=8, key_dim=8, f=2, t=3, heads=2, rng=rng)
        z = rng.standard_normal((2, 3, 8))
        out = M.spatial_attention(tt.Tensor(z), w, heads=2).data
        x = z + w.pos_sphere.data[None, :, :]
        for f in range(2):
            expect = x[f] + loop_mha(loop_layer_norm(x[f]), w.spatial, 2)
            assert np.allclose(out[f], expect, atol=1e-9)
        perm = np.array([1, 0])
        out_p = M.spatial_attention(tt.Tensor(z[perm]), w, heads=2).data
        assert np.allclose(out[perm], out_p, atol=1e-10)

    def test_cross_single_text_token_ignores_query_values(self):
        # L=1: attention weight is 1, output = x + (T_L Wv) Wo regardless of queries
        rng = np.random.default_rng(7)
        w = make_weights(c=8, key_dim=6, f=2, t=2, heads=2, rng=rng)
        text = tt.Tensor(rng.standard_normal((1, 6)))
        z1 = tt.Tensor(rng.standard_normal((2, 2, 8)))
        z2 = tt.Tensor(rng.standard_normal((2, 2, 8)))
        add_on = (text.data @ w.cross.wv.data) @ w.cross.wo.data
        out1 = M.cross_attention(z1, text, w, heads=2).data
        out2 = M.cross_attention(z2, text, w, heads=2).data
        assert np.allclose(out1 - z1.data, add_on[None, None, :].reshape(1, 1, 8), atol=1e-9)
        assert np.allclose(out1 - z1.data, out2 - z2.data, atol=1e-9)

    def test_cross_matches_loop_oracle(self):
        rng = np.random.default_rng(8)
        w = make_weights(c=8, key_dim=6, f=2, t=2, heads=2, rng=rng)   # N = 4 tokens
        text = rng.standard_normal((3, 6))
        z = rng.standard_normal((2, 2, 8))
        out = M.cross_attention(tt.Tensor(z), tt.Tensor(text), w, heads=2).data
        flat = z.reshape(4, 8)
        expect = flat + loop_cross(loop_layer_norm(flat), text, w.cross, 2)
        assert np.allclose(out.reshape(4, 8), expect, atol=1e-9)

    def test_head_mismatch_raises(self):
        rng = np.random.default_rng(9)
        w = make_weights(c=8, key_dim=8, f=2, t=2, heads=2, rng=rng)
        with pytest.raises(ValueError, match="divisible"):
            M.temporal_attention(tt.Tensor(rng.standard_normal((2, 2, 8))), w, heads=3)


class TestVstcaBlock:
    def test_vsta_mode_is_text_independent(self):
        rng = np.random.default_rng(10)
        w = make_weights(c=8, key_dim=6, f=2, t=3, heads=2, rng=rng)
        v = tt.Tensor(rng.standard_normal((2, 3, 8)))
        a = M.vstca_block(v, tt.Tensor(rng.standard_normal((4, 6))), w, 2, use_cross=False)
        b = M.vstca_block(v, tt.Tensor(rng.standard_normal((4, 6))), w, 2, use_cross=False)
        assert np.array_equal(a.data, b.data)
        assert a.shape == (2, 3, 8)

    def test_block_composition_matches_stepwise(self):
        rng = np.random.default_rng(11)
        w = make_weights(c=8, key_dim=6, f=2, t=3, heads=2, rng=rng)
        v = tt.Tensor(rng.standard_normal((2, 3, 8)))
        text = tt.Tensor(rng.standard_normal((4, 6)))
        out = M.vstca_block(v, text, w, 2, use_cross=True).data
        z = M.temporal_attention(v, w, 2)
        z = M.spatial_attention(z, w, 2)
        z = M.cross_attention(z, text, w, 2)
        z = M.feed_forward(z, w.ffn)
        assert np.array_equal(out, z.data)


class TestFuseRetain:
    def test_zero_block_output_returns_last_frame_features(self):
        rng = np.random.default_rng(12)
        vl = rng.standard_normal((3, 2, 4, 5, 5)).astype(np.float32)
        z = tt.Tensor(np.zeros((3, 2, 4), np.float32))
        out = M.residual_fuse_and_retain(z, vl)
        assert np.allclose(out.data, vl[2], atol=1e-7)

    def test_full_scale_shape(self):
        vl = np.zeros((8, 18, 512, 28, 28), np.float32)
        z = tt.Tensor(np.zeros((8, 18, 512), np.float32))
        assert M.residual_fuse_and_retain(z, vl).shape == (18, 512, 28, 28)

    def test_matches_loop(self):
        rng = np.random.default_rng(13)
        vl = rng.standard_normal((2, 3, 4, 2, 2)).astype(np.float32)
        zo = rng.standard_normal((2, 3, 4)).astype(np.float32)
        out = M.residual_fuse_and_retain(tt.Tensor(zo), vl).data
        for t in range(3):
            for c in range(4):
                assert np.allclose(out[t, c], vl[1, t, c] + zo[1, t, c], atol=1e-6)


class TestDecoder:
    def make_model(self, **over):
        cfg = ModelConfig(**{**TINY_MODEL, **over})
        return TextSaliencyModel(cfg, EncoderConfig(**TINY_ENCODER))

    def fused_inputs(self, model, seed=0):
        rng = np.random.default_rng(seed)
        t = model.cfg.viewports
        p = model.cfg.patch_res
        return [
            tt.Tensor(rng.standard_normal((t, c, p // d, p // d)).astype(np.float32))
            for c, d in zip(model.enc_cfg.scale_channels, (8, 16, 32))
        ]

    def test_resolution_ladder_to_quarter_patch(self):
        cfg = ModelConfig()
        model_check = cfg.patch_out
        assert model_check == 56        # 7 -> 14 -> 28 -> 56 for 224 px patches
        tiny = self.make_model()
        out = M.decode(self.fused_inputs(tiny), tiny.decoder, tiny.cfg)
        assert out.shape == (1, 8, 8, 4)    # 1 -> 2 -> 4 -> 8 for 32 px patches

    def test_sigmoid_head_bounds(self):
        m = self.make_model(head="sigmoid")
        out = M.decode(self.fused_inputs(m, 1), m.decoder, m.cfg).data
        assert out.min() > 0.0 and out.max() < 1.0

    def test_relu_head_nonnegative(self):
        m = self.make_model(head="relu")
        out = M.decode(self.fused_inputs(m, 2), m.decoder, m.cfg).data
        assert out.min() >= 0.0

    def test_skips_change_the_output(self):
        with_skips = self.make_model(skips=True)
        inputs = self.fused_inputs(with_skips, 3)
        out_a = M.decode(inputs, with_skips.decoder, with_skips.cfg).data
        no_skips = self.make_model(skips=False)
        out_b = M.decode(self.fused_inputs(no_skips, 3), no_skips.decoder, no_skips.cfg).data
        assert out_a.shape == out_b.shape
        assert not np.allclose(out_a, out_b)


class TestForward:
    def test_full_default_output_shape(self):
        # end-to-end at the published defaults; heaviest test in the suite
        model = TextSaliencyModel(ModelConfig())
        frames = np.random.default_rng(0).uniform(0, 1, (8, 3, 960, 1920)).astype(np.float32)
        out = model.predict(frames, "a person walking through the plaza")
        assert out.shape == (480, 960)
        assert 0.0 <= out.min() and out.max() <= 1.0

    def test_prompts_change_the_map(self, tiny_model_cfg, tiny_encoder_cfg):
        model = TextSaliencyModel(tiny_model_cfg, tiny_encoder_cfg)
        frames = np.random.default_rng(1).uniform(0, 1, (2, 3, 32, 64)).astype(np.float32)
        a = model.predict(frames, "a grey cat in the cat house")
        b = model.predict(frames, "an orange cat on the floor")
        assert a.shape == (32, 64)
        assert np.abs(a - b).max() > 0

    def test_text_blind_config_is_bit_identical_across_prompts(self, tiny_encoder_cfg):
        cfg = ModelConfig(**{**TINY_MODEL, "attention": "vsta", "sim_est": False})
        model = TextSaliencyModel(cfg, tiny_encoder_cfg)
        frames = np.random.default_rng(2).uniform(0, 1, (2, 3, 32, 64)).astype(np.float32)
        a = model.predict(frames, "a grey cat in the cat house")
        b = model.predict(frames, "the red ball under the chair")
        assert np.array_equal(a, b)

    def test_deterministic_given_seed(self, tiny_model_cfg, tiny_encoder_cfg):
        frames = np.random.default_rng(3).uniform(0, 1, (2, 3, 32, 64)).astype(np.float32)
        a = TextSaliencyModel(tiny_model_cfg, tiny_encoder_cfg).predict(frames, "hello world")
        b = TextSaliencyModel(tiny_model_cfg, tiny_encoder_cfg).predict(frames, "hello world")
        assert np.array_equal(a, b)

    def test_viewport_permutation_consistency(self, tiny_model_cfg, tiny_encoder_cfg):
        # permuting viewport order together with the spherical embeddings and
        # the layout centers must leave the blended ERP output unchanged
        base = TextSaliencyModel(tiny_model_cfg, tiny_encoder_cfg)
        frames = np.random.default_rng(4).uniform(0, 1, (2, 3, 32, 64)).astype(np.float32)
        out = base.predict(frames, "a test prompt")

        perm = np.array([2, 0, 3, 1])
        layout_p = geometry.ViewportLayout(
            centers=tuple(base.layout.centers[i] for i in perm),
            fov=base.layout.fov,
            patch_res=base.layout.patch_res,
        )
        permuted = TextSaliencyModel(tiny_model_cfg, tiny_encoder_cfg, layout=layout_p)
        for name, p in base.params.items():
            src = p.data
            if name.endswith("pos_sphere"):
                src = src[perm]
            permuted.params[name].data = src.copy()
        out_p = permuted.predict(frames, "a test prompt")
        assert np.abs(out - out_p).max() < 1e-5


class TestLoss:
    def test_identical_maps_give_near_zero(self):
        rng = np.random.default_rng(5)
        gt = rng.uniform(0.1, 1.0, (4, 8)).astype(np.float32)
        loss = M.kld_loss(tt.Tensor(gt.copy()), gt)
        assert abs(float(loss.data)) < 1e-5

    def test_uniform_vs_delta_is_log4(self):
        pred = tt.Tensor(np.full((2, 2), 0.25, np.float64))
        gt = np.zeros((2, 2))
        gt[0, 0] = 1.0
        loss = M.kld_loss(pred, gt)
        assert abs(float(loss.data) - np.log(4.0)) < 1e-5

    def test_matches_metrics_kld(self):
        rng = np.random.default_rng(6)
        pred = rng.uniform(0.01, 1.0, (6, 12))
        gt = rng.uniform(0.01, 1.0, (6, 12))
        graph_val = float(M.kld_loss(tt.Tensor(pred), gt).data)
        assert abs(graph_val - metrics.kld(pred, gt)) < 1e-9

    def test_nonnegative_for_distinct_maps(self):
        rng = np.random.default_rng(7)
        for _ in range(20):
            pred = rng.uniform(0.01, 1.0, (4, 8))
            gt = rng.uniform(0.01, 1.0, (4, 8))
            assert float(M.kld_loss(tt.Tensor(pred), gt).data) >= 0.0

    def test_optional_cc_term(self):
        rng = np.random.default_rng(8)
        pred = tt.Tensor(rng.uniform(0.01, 1.0, (4, 8)))
        gt = rng.uniform(0.01, 1.0, (4, 8))
        combo = float(M.saliency_loss(pred, gt, kind="kld+cc").data)
        kld_only = float(M.saliency_loss(pred, gt, kind="kld").data)
        assert combo > kld_only    # 1 - cc > 0 for uncorrelated random maps


class TestTraining:
    def test_empty_dataset_raises(self, tiny_model_cfg, tiny_encoder_cfg):
        model = TextSaliencyModel(tiny_model_cfg, tiny_encoder_cfg)
        with pytest.raises(ValueError, match="empty"):
            model.train([])

    def test_one_step_changes_parameters_deterministically(self, tiny_model_cfg, tiny_encoder_cfg):
        frames = np.random.default_rng(9).uniform(0, 1, (2, 3, 32, 64)).astype(np.float32)
        gt = np.zeros((32, 64))
        gt[10:20, 40:55] = 1.0
        sample = TrainingSample(text="a bright thing", gt=gt, frames=frames, key="s")

        def run():
            m = TextSaliencyModel(tiny_model_cfg, tiny_encoder_cfg)
            rows = m.train([sample], epochs=2, batch_size=2, lr=1e-3, seed=0)
            return rows, m.state_dict()

        rows_a, state_a = run()
        rows_b, state_b = run()
        assert rows_a == rows_b
        assert all(np.array_equal(state_a[k], state_b[k]) for k in state_a)
        fresh = TextSaliencyModel(tiny_model_cfg, tiny_encoder_cfg).state_dict()
        assert any(not np.array_equal(state_a[k], fresh[k]) for k in state_a)


class TestCheckpoint:
    def test_save_load_round_trip(self, tmp_path, tiny_model_cfg, tiny_encoder_cfg):
        model = TextSaliencyModel(tiny_model_cfg, tiny_encoder_cfg)
        path = tmp_path / "m.tsal"
        model.save(path)
        loaded = TextSaliencyModel.load(path, tiny_model_cfg, tiny_encoder_cfg)
        for k, p in model.params.items():
            assert np.array_equal(p.data, loaded.params[k].data)

    def test_mismatched_checkpoint_raises(self, tmp_path, tiny_model_cfg, tiny_encoder_cfg):
        model = TextSaliencyModel(tiny_model_cfg, tiny_encoder_cfg)
        state = model.state_dict()
        state.pop(sorted(state)[0])
        from tsal360 import tensorfile

        path = tmp_path / "bad.tsal"
        tensorfile.write_checkpoint(path, state)
        with pytest.raises(ValueError, match="missing"):
            TextSaliencyModel.load(path, tiny_model_cfg, tiny_encoder_cfg)
