import numpy as np
import pytest

from ldgnet import losses
from ldgnet import ndgrad as nd
from ldgnet import txtenc
from ldgnet.ndgrad import Tensor
from ldgnet.textpipe import builtin_meta, encode, pad_batch, prompt_corpus, train_bpe
from ldgnet.txtenc import TextEncoderConfig

import gradcases

TOY = TextEncoderConfig(layers=1, width=16, heads=2, vocab_size=256 + 64 + 3, d_sem=8)


@pytest.fixture(scope="module")
def vocab():
    metas, template = builtin_meta("houston")
    return train_bpe(prompt_corpus(metas, template), 64)


@pytest.fixture(scope="module")
def params():
    return txtenc.init_text_encoder(TOY, seed=0)


def feature(params, vocab, text, config=TOY):
    return txtenc.encode_text(params, config, [encode(vocab, text)]).data[0]


class TestInit:
    def test_deterministic_per_seed(self):
        a = txtenc.init_text_encoder(TOY, seed=1)
        b = txtenc.init_text_encoder(TOY, seed=1)
        assert list(a) == list(b)
        for k in a:
            np.testing.assert_array_equal(a[k].data, b[k].data)

    def test_every_name_has_text_prefix(self, params):
        assert all(k.startswith("txt.") for k in params)

    def test_paper_scale_parameter_count_near_33m(self):
        config = TextEncoderConfig(layers=3, width=512, heads=8, vocab_size=49152, d_sem=512)
        count = txtenc.parameter_count(txtenc.init_text_encoder(config, seed=0))
        assert abs(count - 33e6) / 33e6 < 0.10

    def test_parameter_count_formula(self, params):
        w, v, t, d = 16, TOY.vocab_size, TOY.max_len, 8
        per_layer = 2 * 2 * w + (w * 3 * w + 3 * w) + (w * w + w) + (w * 4 * w + 4 * w) + (4 * w * w + w)
        assert txtenc.parameter_count(params) == v * w + t * w + per_layer + 2 * w + w * d + d

    def test_heads_must_divide_width(self):
        with pytest.raises(ValueError, match="divisible"):
            txtenc.init_text_encoder(TextEncoderConfig(width=8, heads=3), seed=0)

    def test_vocab_too_small(self):
        with pytest.raises(ValueError):
            TextEncoderConfig(vocab_size=100).validate()


class TestEncodeText:
    def test_unit_norm(self, params, vocab):
        seqs = [encode(vocab, t) for t in ("trees", "a hyperspectral image of water", "")]
        ids, mask = pad_batch(seqs, vocab.pad)
        out = txtenc.encode_text(params, TOY, ids, mask).data
        assert out.shape == (3, 8)
        np.testing.assert_allclose(np.linalg.norm(out, axis=1), 1.0, atol=1e-6)

    def test_lower_casing_gives_identical_features(self, params, vocab):
        np.testing.assert_array_equal(
            feature(params, vocab, "Trees Beside The ROAD"), feature(params, vocab, "trees beside the road")
        )

    def test_word_order_matters(self, params, vocab):
        a = feature(params, vocab, "trees beside road")
        b = feature(params, vocab, "road beside trees")
        assert np.abs(a - b).max() > 1e-6

    def test_pad_after_end_is_invisible(self, params, vocab):
        seq = list(encode(vocab, "grass near water"))
        base = txtenc.encode_text(params, TOY, [seq]).data
        for extra in (1, 5, TOY.max_len - len(seq)):
            padded = txtenc.encode_text(params, TOY, [seq + [vocab.pad] * extra]).data
            np.testing.assert_allclose(padded, base, rtol=0, atol=1e-10)

    def test_batch_rows_independent_of_neighbours(self, params, vocab):
        seqs = [encode(vocab, "water"), encode(vocab, "a very long sentence about bare soil and roads")]
        ids, mask = pad_batch(seqs, vocab.pad)
        batched = txtenc.encode_text(params, TOY, ids, mask).data
        alone = txtenc.encode_text(params, TOY, [seqs[0]]).data[0]
        np.testing.assert_allclose(batched[0], alone, rtol=0, atol=1e-10)

    def test_end_token_sees_later_tokens(self, params, vocab):
        # attention is bidirectional, so END attends to any non-PAD token after it
        seq = list(encode(vocab, "water"))
        a = txtenc.encode_text(params, TOY, [seq + [vocab.pad]]).data
        b = txtenc.encode_text(params, TOY, [seq + [ord("x")]]).data
        assert np.abs(a - b).max() > 1e-6

    def test_causal_ignores_tokens_after_end(self, vocab):
        config = TextEncoderConfig(**{**TOY.__dict__, "causal": True})
        p = txtenc.init_text_encoder(config, seed=0)
        seq = list(encode(vocab, "water"))
        a = txtenc.encode_text(p, config, [seq + [ord("x")]]).data
        b = txtenc.encode_text(p, config, [seq + [ord("y")]]).data
        np.testing.assert_allclose(a, b, rtol=0, atol=1e-12)

    def test_missing_end(self, params):
        with pytest.raises(ValueError, match="END"):
            txtenc.encode_text(params, TOY, [[TOY.vocab_size - 3, 5, 6]])

    def test_too_long(self, params):
        with pytest.raises(ValueError, match="exceeds"):
            txtenc.encode_text(params, TOY, np.full((1, TOY.max_len + 1), TOY.end_id))


class TestGradients:
    def test_alignment_gradient_through_text_encoder(self, vocab):
        params = txtenc.init_text_encoder(TOY, seed=3)
        # see gradcases.toy_setup for why the embeddings are scaled up
        for name in ("txt.tok", "txt.pos"):
            params[name] = Tensor(params[name].data * 10.0, requires_grad=True)
        seqs = [encode(vocab, t) for t in ("trees", "water", "grass", "road")]
        ids, mask = pad_batch(seqs, vocab.pad)
        labels = np.array([0, 1, 0, 1])
        visual = nd.l2_normalize(np.random.default_rng(0).normal(size=(4, 8)))

        for name in ("txt.layer0.attn.qkv.w", "txt.layer0.mlp.proj.w", "txt.ln_final.gamma", "txt.proj.w"):

            def f(w, name=name):
                local = dict(params)
                local[name] = w
                text = txtenc.encode_text(local, TOY, ids, mask)
                return losses.coarse_alignment(visual, labels, text, scale=5.0)

            ref = params[name].data
            coords = np.random.default_rng(1).choice(ref.size, size=12, replace=False).tolist()
            assert gradcases.branch_frozen_error(f, ref, coords) < gradcases.TOL, name
