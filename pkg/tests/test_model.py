import dataclasses

import numpy as np
import pytest

from glied import autograd as ag
from glied.model import BOS, DecoderState, GliedDecoder, ModelConfig, AttentionTrace, positional_encoding

from conftest import gradcheck, micro_config, micro_inputs


def jitter(model, rng, scale=0.3):
    """Move every parameter off its initial value so zero biases and unit gains hide nothing."""
    for _, p in model.named_parameters():
        p.data += scale * rng.normal(size=p.data.shape)


def encode(model, inputs):
    regions, rmask, attrs, amask = inputs
    return model.encode(regions, rmask, attrs, amask)


# ---------------------------------------------------------------------------
# independent numpy composition of the decoder, one image at a time


def np_softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def np_ln(x, g):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + 1e-5) * g.gain.data + g.bias.data


def np_lin(x, lin):
    return x @ lin.w.data + lin.b.data


def np_mha(q, kv, p, mask=None):
    n, dk = p.n_heads, p.d_k
    Q, K, V = np_lin(q, p.q), np_lin(kv, p.k), np_lin(kv, p.v)
    heads = []
    for h in range(n):
        s = slice(h * dk, (h + 1) * dk)
        scores = Q[:, s] @ K[:, s].T / np.sqrt(dk)
        if mask is not None:
            scores = np.where(mask, scores, -np.inf)
        heads.append(np_softmax(scores) @ V[:, s])
    return np_lin(np.concatenate(heads, axis=1), p.out)


def np_G(new, res, g):
    return np_ln(res + new, g)


def np_post(c, x, pp):
    ff = np_lin(np.maximum(np_lin(c, pp.ff.inner), 0.0), pp.ff.outer)
    return np_G(np_G(ff, c, pp.g_inner), x, pp.g_outer)


def reference_logits(m, regions, attr_ids, tokens):
    """Logits for every position of ``tokens`` (one image, unpadded sources)."""
    cfg = m.config
    E = m.embed.data
    I = np_lin(regions, m.region_proj)
    A = np_lin(E[attr_ids], m.embed_proj)
    x = np_lin(E[tokens], m.embed_proj) + positional_encoding(len(tokens), cfg.d_h)
    if cfg.global_visual:
        g = np_G(np_mha(I, I, m.region_attn), I, m.region_g)
        I_tilde = np_post(g, I, m.region_post)
    q = np_G(np_mha(x, A, m.colloc_attn), x, m.colloc_g) if cfg.global_attribute else x
    causal = np.tril(np.ones((len(tokens), len(tokens)), bool))
    xt = np_G(np_mha(q, q, m.context_attn, causal), q, m.context_g)
    if cfg.global_visual and cfg.local_distill:
        mid = np_mha(xt, I_tilde, m.cross_attn)
    else:
        vis = I_tilde if cfg.global_visual else I
        mid = np_mha(xt, vis, m.cross_attn) + np_mha(xt, A, m.cross_attn)
    c = np_post(np_G(mid, xt, m.cross_g), x, m.post)
    if cfg.local_distill:
        c = np_G(np_mha(c, I, m.local_attn) + np_mha(c, A, m.local_attn), c, m.local_g)
    return c @ m.w_out.data


def run_steps(model, src, tokens, trace=None):
    state, out = DecoderState(), []
    for t in range(tokens.shape[1]):
        logits, state = model.step(tokens[:, t], state, src, trace=trace)
        out.append(logits.data)
    return np.stack(out, axis=1)


def random_caption(rng, batch, length, vocab):
    toks = rng.integers(2, vocab, size=(batch, length))
    toks[:, 0] = BOS
    return toks


VARIANTS = ["base", "global_visual", "global_attribute", "global", "local", "glied"]


# ---------------------------------------------------------------------------


class TestInputs:
    def test_embed_deterministic_and_positional(self, rng):
        m = GliedDecoder(micro_config())
        a = m.embed_words([[4, 4]]).data
        np.testing.assert_array_equal(a, m.embed_words([[4, 4]]).data)
        assert not np.allclose(a[0, 0], a[0, 1])
        diff = a[0, 1] - a[0, 0]
        np.testing.assert_allclose(diff, positional_encoding(2, 8)[1] - positional_encoding(2, 8)[0], atol=1e-12)

    def test_attribute_embedding_has_no_position(self, rng):
        m = GliedDecoder(micro_config())
        a = m.embed_attributes(np.array([[5, 5]])).data
        np.testing.assert_array_equal(a[0, 0], a[0, 1])

    def test_shared_table_gets_both_gradients(self, rng):
        m = GliedDecoder(micro_config())
        w = ag.sum_(m.embed_words(np.array([[4]])))
        w.backward()
        g_word = m.embed.grad.copy()
        m.embed.grad = None
        ag.sum_(m.embed_attributes(np.array([[5]]))).backward()
        g_attr = m.embed.grad.copy()
        m.embed.grad = None
        ag.add(ag.sum_(m.embed_words(np.array([[4]]))), ag.sum_(m.embed_attributes(np.array([[5]])))).backward()
        np.testing.assert_allclose(m.embed.grad, g_word + g_attr, atol=1e-12)
        assert g_word[4].any() and g_attr[5].any()

    def test_out_of_range_token(self):
        m = GliedDecoder(micro_config())
        with pytest.raises(IndexError):
            m.embed_words([[7]])

    def test_project_regions(self, rng):
        m = GliedDecoder(micro_config())
        zero = m.project_regions(np.zeros((3, 6))).data
        np.testing.assert_array_equal(zero, np.broadcast_to(m.region_proj.b.data, (3, 8)))
        r = rng.normal(size=(3, 6))
        perm = [2, 0, 1]
        np.testing.assert_array_equal(m.project_regions(r[perm]).data, m.project_regions(r).data[perm])
        with pytest.raises(ag.ShapeError):
            m.project_regions(np.zeros((3, 5)))

    def test_project_regions_gradient(self, rng):
        m = GliedDecoder(micro_config())
        r = ag.parameter(rng.normal(size=(3, 6)))
        c = rng.normal(size=(3, 8))
        assert gradcheck(lambda: ag.sum_(ag.mul(m.project_regions(r), c)), [r, m.region_proj.w]) < 1e-6


class TestReferenceChain:
    @pytest.mark.parametrize("variant", VARIANTS)
    def test_step_matches_numpy_composition(self, rng, variant):
        m = GliedDecoder(micro_config(variant, d_r=6), seed=3)
        jitter(m, rng)
        inputs = micro_inputs(rng, batch=2, k=3)
        src = encode(m, inputs)
        tokens = random_caption(rng, 2, 5, 7)
        got = run_steps(m, src, tokens)
        for b in range(2):
            ref = reference_logits(m, inputs[0][b], inputs[2][b], tokens[b])
            np.testing.assert_allclose(got[b], ref, rtol=0, atol=1e-10)

    def test_single_region_single_attribute_weights_are_one(self, rng):
        m = GliedDecoder(micro_config("glied"))
        src = encode(m, micro_inputs(rng, batch=1, k=1))
        trace = AttentionTrace()
        m.step([BOS], DecoderState(), src, trace=trace)
        for name in ("visual", "collocation", "local_visual", "local_attribute"):
            np.testing.assert_array_equal(getattr(trace, name)[0], [[[[1.0]]]])


class TestInvariants:
    def test_distilled_regions_fixed_across_steps(self, rng):
        m = GliedDecoder(micro_config("glied"))
        inputs = micro_inputs(rng, batch=2, k=3)
        src = encode(m, inputs)
        before = src.distilled.data.copy()
        tokens = random_caption(rng, 2, 6, 7)
        run_steps(m, src, tokens)
        np.testing.assert_array_equal(src.distilled.data, before)
        again = encode(m, inputs).distilled.data
        np.testing.assert_array_equal(again, before)

    def test_distilled_regions_do_not_see_words(self, rng):
        m = GliedDecoder(micro_config("glied"))
        inputs = micro_inputs(rng, batch=1, k=3)
        src = encode(m, inputs)
        i0 = src.distilled.data.copy()
        run_steps(m, src, random_caption(rng, 1, 6, 7))
        np.testing.assert_array_equal(encode(m, inputs).distilled.data, i0)

    def test_sharing_is_single_storage(self, rng):
        m = GliedDecoder(micro_config("glied"))
        named = dict(m.named_parameters(with_aliases=True))
        for a, b in (("H_v", "H_a"), ("H_vl", "H_al")):
            for part in ("q.w", "q.b", "k.w", "k.b", "v.w", "v.b", "out.w", "out.b"):
                assert named[f"{a}.{part}"] is named[f"{b}.{part}"]
                assert np.shares_memory(named[f"{a}.{part}"].data, named[f"{b}.{part}"].data)
        assert named["word_embed"] is named["attr_embed"]

    def test_mutating_shared_storage_moves_both_paths(self, rng):
        m = GliedDecoder(micro_config("base"))
        src = encode(m, micro_inputs(rng, batch=1, k=2))
        trace = AttentionTrace()
        m.step([BOS], DecoderState(), src, trace=trace)
        named = dict(m.named_parameters(with_aliases=True))
        named["H_v.k.w"].data += rng.normal(size=named["H_v.k.w"].shape)
        trace2 = AttentionTrace()
        m.step([BOS], DecoderState(), src, trace=trace2)
        assert not np.allclose(trace.attribute[0], trace2.attribute[0])
        assert not np.allclose(trace.visual[0], trace2.visual[0])

    @pytest.mark.parametrize("variant", ["base", "glied"])
    def test_causality(self, rng, variant):
        m = GliedDecoder(micro_config(variant))
        jitter(m, rng)
        src = encode(m, micro_inputs(rng))
        tokens = random_caption(rng, 2, 6, 7)
        base = m.forward(tokens, src).data
        for t in range(5):
            mutated = tokens.copy()
            mutated[:, t + 1:] = rng.integers(2, 7, size=mutated[:, t + 1:].shape)
            out = m.forward(mutated, src).data
            assert np.abs(out[:, :t + 1] - base[:, :t + 1]).max() <= 1e-12

    def test_flags_off_is_base(self, rng):
        glied = GliedDecoder(micro_config("glied"), seed=5)
        base = GliedDecoder(micro_config("base"), seed=5)
        for (n1, p1), (n2, p2) in zip(base.named_parameters()[:-1], glied.named_parameters()):
            assert n1 == n2
            np.testing.assert_array_equal(p1.data, p2.data)
        np.testing.assert_array_equal(base.w_out.data, glied.w_out.data)
        glied.config = glied.config.with_variant("base")
        inputs = micro_inputs(rng, ragged=True, k=3)
        tokens = random_caption(rng, 2, 5, 7)
        np.testing.assert_array_equal(glied.forward(tokens, encode(glied, inputs)).data,
                                      base.forward(tokens, encode(base, inputs)).data)

    @pytest.mark.parametrize("variant", VARIANTS)
    def test_region_permutation_equivariance(self, rng, variant):
        m = GliedDecoder(micro_config(variant))
        jitter(m, rng)
        regions, rmask, attrs, amask = micro_inputs(rng, batch=1, k=4)
        tokens = random_caption(rng, 1, 5, 7)
        perm = rng.permutation(4)
        a = m.forward(tokens, m.encode(regions, rmask, attrs, amask)).data
        b = m.forward(tokens, m.encode(regions[:, perm], rmask, attrs, amask)).data
        assert np.abs(a - b).max() < 1e-9

    @pytest.mark.parametrize("variant", VARIANTS)
    def test_attention_rows_normalized_with_masked_zeros(self, rng, variant):
        m = GliedDecoder(micro_config(variant))
        jitter(m, rng)
        src = encode(m, micro_inputs(rng, k=3, ragged=True))
        trace = AttentionTrace()
        run_steps(m, src, random_caption(rng, 2, 5, 7), trace)
        assert trace.max_normalization_error() < 1e-12
        for name in ("visual", "local_visual"):
            for w in getattr(trace, name):
                if variant == "base" or name == "local_visual" or not m.config.global_visual:
                    assert (w[1, ..., -1] == 0.0).all()
        for name in ("attribute", "collocation", "local_attribute"):
            for w in getattr(trace, name):
                assert (w[1, ..., -1] == 0.0).all()
        if trace.region_groups is not None:
            assert (trace.region_groups[1, :, :, -1] == 0.0).all()

    def test_single_head_cross_attention(self, rng):
        m = GliedDecoder(micro_config("glied", heads=2))
        src = encode(m, micro_inputs(rng, k=3))
        trace = AttentionTrace()
        m.step([BOS, BOS], DecoderState(), src, trace=trace)
        assert trace.context[0].shape[1] == 2
        for name in ("visual", "collocation", "local_visual", "local_attribute"):
            assert getattr(trace, name)[0].shape[1] == 1


class TestIncremental:
    def test_teacher_forced_matches_incremental(self):
        worst = 0.0
        for seed in range(20):
            rng = np.random.default_rng(seed)
            variant = VARIANTS[seed % len(VARIANTS)]
            m = GliedDecoder(micro_config(variant), seed=seed)
            jitter(m, rng)
            src = encode(m, micro_inputs(rng, k=3, ragged=True))
            tokens = random_caption(rng, 2, 6, 7)
            worst = max(worst, np.abs(m.forward(tokens, src).data - run_steps(m, src, tokens)).max())
        assert worst < 1e-9

    def test_step_requires_bos_first(self, rng):
        m = GliedDecoder(micro_config())
        src = encode(m, micro_inputs(rng))
        with pytest.raises(ValueError):
            m.step([4, 4], DecoderState(), src)

    def test_max_len_enforced(self, rng):
        m = GliedDecoder(micro_config(max_len=3))
        src = encode(m, micro_inputs(rng))
        with pytest.raises(ValueError):
            m.forward(random_caption(rng, 2, 4, 7), src)


class TestGradients:
    @pytest.mark.parametrize("variant", ["base", "glied"])
    def test_full_model_gradcheck(self, rng, variant):
        m = GliedDecoder(micro_config(variant, d_h=8, vocab=7), seed=11)
        jitter(m, rng, 0.2)
        regions, rmask, attrs, amask = micro_inputs(rng, batch=1, k=2)
        tokens = np.array([[BOS, 4, 5, 6]])
        targets = np.array([4, 5, 6, 2])

        def loss():
            src = m.encode(regions, rmask, attrs, amask)
            logits = m.forward(tokens, src)
            return ag.cross_entropy(ag.reshape(logits, (4, 7)), targets, 0)

        assert gradcheck(loss, m.parameters()) < 1e-4

    def test_key_bias_gradient_is_zero(self, rng):
        # a shared shift of every score leaves the softmax unchanged
        m = GliedDecoder(micro_config("glied"))
        jitter(m, rng)
        src = encode(m, micro_inputs(rng))
        logits = m.forward(random_caption(rng, 2, 4, 7), src)
        ag.sum_(ag.mul(logits, rng.normal(size=logits.shape))).backward()
        for name, p in m.named_parameters():
            if name.endswith(".k.b"):
                assert np.abs(p.grad).max() < 1e-14


class TestParameterCount:
    def test_full_scale_audit(self):
        base, _ = GliedDecoder.__new__(GliedDecoder), None
        totals = {v: count_params(ModelConfig.full_size(v)) for v in ("base", "global_visual", "global_attribute", "local", "glied")}
        assert abs(totals["base"] - 12.3e6) <= 0.2 * 12.3e6
        assert abs(totals["glied"] - 18.3e6) <= 0.2 * 18.3e6
        assert 4e6 <= totals["glied"] - totals["base"] <= 8e6
        for single in ("global_visual", "global_attribute", "local"):
            assert totals["base"] < totals[single] < totals["glied"]

    def test_vocabulary_doubling(self):
        cfg = micro_config("glied", vocab=7)
        a = count_params(cfg)
        b = count_params(dataclasses.replace(cfg, vocab_size=14))
        assert b - a == 7 * (cfg.d_e + cfg.d_h)

    def test_breakdown_sums(self):
        total, parts = GliedDecoder(micro_config("glied")).parameter_count()
        assert total == sum(parts.values())
        assert "H_a" not in parts and "H_al" not in parts and "attr_embed" not in parts


def count_params(cfg):
    return GliedDecoder(cfg).parameter_count()[0]
