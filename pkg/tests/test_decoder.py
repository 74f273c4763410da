import numpy as np
import pytest

from bundlenat import numerics as nx
from bundlenat.decoder import (
    PredictionDistribution,
    copy_from_encoder,
    cross_attention,
    decode,
    decoder_ffn,
    decoder_hidden,
    infer_bundle,
    init_decoder_params,
    one_token_attention,
    project,
)
from bundlenat.encoder import encode, init_encoder_params
from bundlenat.exceptions import ConfigError
from bundlenat.numerics import ParamStore, Tensor

from test_encoder import loop_ffn


def _store(d=8, heads=2, depth=2, n_items=12, seed=0):
    store = ParamStore()
    init_decoder_params(store, d, heads, depth, n_items, np.random.default_rng(seed))
    return store


def loop_cross_attention(h, xf, store, prefix, n_heads):
    d = h.shape[1]
    d_h = d // n_heads
    heads = []
    for i in range(n_heads):
        q = h[0] @ store[f"{prefix}.{i}.wq"].data
        logits = np.array([q @ (row @ store[f"{prefix}.{i}.wk"].data) for row in xf]) / np.sqrt(d_h)
        w = np.exp(logits - logits.max())
        w /= w.sum()
        out = np.zeros(d_h)
        for j, row in enumerate(xf):
            out += w[j] * (row @ store[f"{prefix}.{i}.wv"].data)
        heads.append(out)
    return np.concatenate(heads)[None, :] @ store[f"{prefix}.wm"].data


class TestCopy:
    def test_constant_rows(self):
        row = np.array([[0.5, -1.0, 2.0]])
        assert np.array_equal(copy_from_encoder(Tensor(np.tile(row, (4, 1)))).data, row)

    def test_arithmetic(self):
        assert np.array_equal(copy_from_encoder(Tensor([[1.0, 3.0], [3.0, 5.0]])).data, [[2.0, 4.0]])


class TestOneToken:
    def test_identity_weights(self):
        store = ParamStore()
        eye = np.eye(4)
        for h in range(2):
            store.add(f"s.{h}.wq", np.random.default_rng(h).normal(size=(4, 2)))
            store.add(f"s.{h}.wk", np.random.default_rng(h + 5).normal(size=(4, 2)))
            store.add(f"s.{h}.wv", eye[:, 2 * h : 2 * h + 2])
        store.add("s.wm", eye)
        h = Tensor([[0.3, -0.2, 1.5, 0.7]])
        np.testing.assert_allclose(one_token_attention(h, store, "s", 2).data, h.data, atol=1e-15)

    def test_query_key_irrelevant(self):
        store = _store()
        h = Tensor(np.random.default_rng(1).normal(size=(1, 8)))
        before = one_token_attention(h, store, "dec.0.self", 2).data
        for i in range(2):
            store.set(f"dec.0.self.{i}.wq", np.random.default_rng(9 + i).normal(size=(8, 4)) * 50)
            store.set(f"dec.0.self.{i}.wk", np.random.default_rng(19 + i).normal(size=(8, 4)) * 50)
        after = one_token_attention(h, store, "dec.0.self", 2).data
        np.testing.assert_allclose(after, before, atol=1e-14)


class TestCrossAttention:
    def test_loop_oracle(self):
        store = _store()
        rng = np.random.default_rng(2)
        h, xf = rng.normal(size=(1, 8)), rng.normal(size=(4, 8))
        out = cross_attention(Tensor(h), Tensor(xf), store, "dec.0.cross", 2).data
        np.testing.assert_allclose(out, loop_cross_attention(h, xf, store, "dec.0.cross", 2), atol=1e-12, rtol=0)

    def test_identical_rows(self):
        store = _store()
        rng = np.random.default_rng(3)
        xf = np.tile(rng.normal(size=(1, 8)), (5, 1))
        a = cross_attention(Tensor(rng.normal(size=(1, 8))), Tensor(xf), store, "dec.0.cross", 2).data
        b = cross_attention(Tensor(rng.normal(size=(1, 8))), Tensor(xf), store, "dec.0.cross", 2).data
        np.testing.assert_allclose(a, b, atol=1e-14)

    def test_output_shape(self):
        store = _store()
        out = cross_attention(Tensor(np.ones((1, 8))), Tensor(np.ones((7, 8))), store, "dec.1.cross", 2)
        assert out.shape == (1, 8)


class TestDecoderFFN:
    def test_loop_oracle(self):
        store = _store()
        h = np.random.default_rng(4).normal(size=(1, 8))
        out = decoder_ffn(Tensor(h), store, "dec.0").data
        np.testing.assert_allclose(out, loop_ffn(h, store["dec.0.w1"].data, store["dec.0.w2"].data), atol=1e-12)

    def test_width_is_model_width(self):
        assert _store()["dec.0.w1"].shape == (8, 8)


class TestProject:
    def test_hand_case(self):
        store = ParamStore()
        store.add("dec.proj.wo", [[1.0, 0.0, 2.0], [0.0, 1.0, 2.0]])
        store.add("dec.proj.bo", np.zeros((1, 3)))
        out = project(Tensor([[1.0, -1.0]]), store).data
        np.testing.assert_allclose(out, [[0.731059, 0.268941, 0.5]], atol=1e-6)

    def test_zero_input(self):
        store = _store()
        store.set("dec.proj.bo", np.zeros((1, 12)))
        assert np.array_equal(project(Tensor(np.zeros((1, 8))), store).data, np.full((1, 12), 0.5))

    def test_saturation(self):
        store = _store()
        bias = np.zeros((1, 12))
        bias[0, 3] = 30.0
        store.set("dec.proj.bo", bias)
        assert abs(project(Tensor(np.zeros((1, 8))), store).data[0, 3] - 1.0) < 1e-9

    def test_vocab_width(self):
        assert _store(n_items=31)["dec.proj.wo"].shape == (8, 31)


class TestInferBundle:
    def test_all_candidates(self):
        mask = np.zeros(6, dtype=bool)
        mask[[1, 4, 5]] = True
        dist = PredictionDistribution(np.random.default_rng(0).random(6), mask)
        assert sorted(infer_bundle(dist, 3)) == [1, 4, 5]

    def test_ties_ascending(self):
        mask = np.ones(8, dtype=bool)
        mask[0] = False
        assert infer_bundle(PredictionDistribution(np.full(8, 0.5), mask), 3) == [1, 2, 3]

    def test_sort_oracle(self):
        rng = np.random.default_rng(5)
        for _ in range(200):
            scores = rng.integers(0, 5, size=30) / 4.0
            mask = rng.random(30) < 0.5
            mask[:3] = True
            cand = np.flatnonzero(mask)
            k = int(rng.integers(1, len(cand) + 1))
            oracle = sorted(cand.tolist(), key=lambda i: (-scores[i], i))[:k]
            assert infer_bundle(PredictionDistribution(scores, mask), k) == oracle

    def test_non_candidates_never_chosen(self):
        scores = np.array([0.9, 0.1, 0.99, 0.2])
        mask = np.array([False, True, False, True])
        assert infer_bundle(PredictionDistribution(scores, mask), 2) == [3, 1]

    def test_k_too_large(self):
        with pytest.raises(ConfigError):
            infer_bundle(PredictionDistribution(np.zeros(4), np.array([True, True, False, False])), 3)


class TestDecode:
    @pytest.mark.parametrize("k", [1, 5, 20])
    def test_single_pass(self, k):
        store = _store(n_items=40)
        rng = np.random.default_rng(6)
        cand = rng.choice(40, size=25, replace=False)
        res = decode(Tensor(rng.normal(size=(25, 8))), store, k, cand, 2, 2)
        assert res.passes == 1
        assert len(res.bundle) == len(set(res.bundle)) == k
        assert set(res.bundle) <= set(cand.tolist())
        assert np.all((res.distribution.scores > 0) & (res.distribution.scores < 1))

    def test_variable_size_input(self):
        store = _store(n_items=40)
        for n in (1, 3, 17):
            res = decode(Tensor(np.ones((n, 8))), store, 1, list(range(n)), 2, 2)
            assert len(res.bundle) == 1

    def test_permutation_invariance(self):
        store = ParamStore()
        rng = np.random.default_rng(7)
        init_encoder_params(store, 8, 2, 2, 32, rng)
        init_decoder_params(store, 8, 2, 2, 50, rng)
        cand = rng.choice(50, size=10, replace=False)
        x = rng.normal(size=(10, 8))
        ref = decode(encode(Tensor(x), store, 2, 2), store, 4, cand, 2, 2)
        for _ in range(20):
            perm = rng.permutation(10)
            res = decode(encode(Tensor(x[perm]), store, 2, 2), store, 4, cand[perm], 2, 2)
            assert res.bundle == ref.bundle
            assert np.array_equal(res.distribution.scores, ref.distribution.scores)

    def test_gradient(self):
        store = ParamStore()
        rng = np.random.default_rng(8)
        init_encoder_params(store, 8, 2, 1, 16, rng)
        init_decoder_params(store, 8, 2, 1, 6, rng)
        x = rng.normal(size=(4, 8))
        target = np.array([[1.0, 0.0, 1.0, 0.0, 0.0, 1.0]])

        def f():
            h = decoder_hidden(encode(Tensor(x), store, 1, 2), store, 1, 2)
            return nx.binary_cross_entropy(project(h, store), target)

        assert nx.finite_diff_check(f, store, eps=1e-5, reference_dtype=np.longdouble) < 1e-5
