import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from liber.errors import DegenerateInputError, DimensionError
from liber.fusion import (
    ATTENTION,
    MEAN,
    AttentionWeights,
    attention_matrix,
    fuse_batch,
    fuse_batch_backward,
    mean_pool_fuse,
    self_attention_fuse,
    softmax_rows,
)


def weights(d_red=4, d_att=3, seed=0):
    return AttentionWeights.init(d_red, d_att, seed)


def loop_attention(R, w):
    """Scalar-loop reference for mean_i sum_k A[i,k] (R W_V)[k]."""
    j = len(R)
    q, k, v = R @ w.w_q, R @ w.w_k, R @ w.w_v
    out = np.zeros(w.d_att)
    for i in range(j):
        logits = [float(q[i] @ k[m]) / math.sqrt(w.d_att) for m in range(j)]
        top = max(logits)
        ex = [math.exp(x - top) for x in logits]
        z = sum(ex)
        for m in range(j):
            out += ex[m] / z * v[m]
    return out / j


class TestSelfAttention:
    def test_matches_loop_reference(self):
        rng = np.random.default_rng(0)
        w = weights()
        R = rng.standard_normal((5, 4))
        np.testing.assert_allclose(self_attention_fuse(R, w).values, loop_attention(R, w), atol=1e-12)

    def test_single_rep_is_value_projection(self):
        w = weights(seed=3)
        r = np.random.default_rng(1).standard_normal(4)
        out = self_attention_fuse([r], w)
        np.testing.assert_array_equal(out.values, r @ w.w_v)
        assert out.partition_count_used == 1

    def test_identical_reps(self):
        w = weights(seed=4)
        r = np.random.default_rng(2).standard_normal(4)
        R = np.tile(r, (6, 1))
        np.testing.assert_allclose(attention_matrix(R, w), np.full((6, 6), 1 / 6), atol=1e-12)
        np.testing.assert_allclose(self_attention_fuse(R, w).values, r @ w.w_v, atol=1e-12)

    @settings(max_examples=50, deadline=None)
    @given(seed=st.integers(0, 10_000), j=st.integers(1, 12))
    def test_rows_stochastic(self, seed, j):
        rng = np.random.default_rng(seed)
        A = attention_matrix(rng.standard_normal((j, 4)) * 3, weights(seed=seed))
        np.testing.assert_allclose(A.sum(axis=1), 1.0, atol=1e-9)
        assert np.all(A > 0) and np.all(A <= 1)

    def test_logit_shift_invariance(self):
        S = np.random.default_rng(5).standard_normal((4, 4))
        shifted = S.copy()
        shifted[2] += 123.4
        np.testing.assert_allclose(softmax_rows(shifted), softmax_rows(S), atol=1e-9)

    def test_masked_logits(self):
        out = softmax_rows(np.array([[0.0, -np.inf, 0.0]]))
        np.testing.assert_array_equal(out, [[0.5, 0.0, 0.5]])

    def test_errors(self):
        with pytest.raises(DegenerateInputError):
            self_attention_fuse([], weights())
        with pytest.raises(DimensionError):
            self_attention_fuse([np.ones(3)], weights())
        with pytest.raises(DimensionError):
            self_attention_fuse([np.ones(4), np.ones(3)], weights())


class TestMeanPool:
    def test_example(self):
        w = AttentionWeights(np.eye(2), np.eye(2), np.eye(2))
        out = mean_pool_fuse([np.array([1.0, 0.0]), np.array([0.0, 1.0])], w)
        np.testing.assert_array_equal(out.values, [0.5, 0.5])

    def test_single_rep_agrees_with_attention(self):
        w = weights(seed=6)
        r = [np.random.default_rng(3).standard_normal(4)]
        np.testing.assert_array_equal(mean_pool_fuse(r, w).values, self_attention_fuse(r, w).values)

    def test_identical_reps_agree_with_attention(self):
        w = weights(seed=7)
        R = np.tile(np.random.default_rng(4).standard_normal(4), (3, 1))
        np.testing.assert_allclose(mean_pool_fuse(R, w).values, self_attention_fuse(R, w).values, atol=1e-12)

    @pytest.mark.parametrize("c", [-2.0, 0.5, 3.0])
    def test_scaling(self, c):
        w = weights(seed=8)
        R = np.random.default_rng(5).standard_normal((4, 4))
        np.testing.assert_allclose(mean_pool_fuse(c * R, w).values, c * mean_pool_fuse(R, w).values, atol=1e-12)


class TestBatch:
    def padded(self, counts, d=4, seed=0):
        rng = np.random.default_rng(seed)
        J = max(counts)
        R = np.zeros((len(counts), J, d))
        mask = np.zeros((len(counts), J), dtype=bool)
        for b, n in enumerate(counts):
            R[b, :n] = rng.standard_normal((n, d))
            mask[b, :n] = True
        return R, mask

    @pytest.mark.parametrize("mode", [ATTENTION, MEAN])
    def test_matches_unbatched(self, mode):
        w = weights()
        R, mask = self.padded([1, 3, 5, 2])
        out, _ = fuse_batch(R, mask, w, mode)
        single = self_attention_fuse if mode == ATTENTION else mean_pool_fuse
        for b in range(len(R)):
            np.testing.assert_allclose(out[b], single(R[b, mask[b]], w).values, atol=1e-12)

    @pytest.mark.parametrize("mode", [ATTENTION, MEAN])
    def test_gradient_check(self, mode):
        w = weights(seed=2)
        R, mask = self.padded([3, 3, 1, 2], seed=9)
        g = np.random.default_rng(10).standard_normal((4, w.d_att))

        def loss(wq, wk, wv):
            out, _ = fuse_batch(R, mask, AttentionWeights(wq, wk, wv), mode)
            return float(np.sum(out * g))

        _, cache = fuse_batch(R, mask, w, mode)
        grads = fuse_batch_backward(g, cache, w)
        mats = {"w_q": w.w_q, "w_k": w.w_k, "w_v": w.w_v}
        h = 1e-4
        for name, m in mats.items():
            num = np.zeros_like(m)
            for idx in np.ndindex(m.shape):
                plus = {k: v.copy() for k, v in mats.items()}
                minus = {k: v.copy() for k, v in mats.items()}
                plus[name][idx] += h
                minus[name][idx] -= h
                num[idx] = (loss(plus["w_q"], plus["w_k"], plus["w_v"])
                            - loss(minus["w_q"], minus["w_k"], minus["w_v"])) / (2 * h)
            np.testing.assert_allclose(grads[name], num, rtol=1e-3, atol=1e-7)

    def test_empty_entry_rejected(self):
        R, mask = self.padded([2, 1])
        mask[1] = False
        with pytest.raises(DegenerateInputError):
            fuse_batch(R, mask, weights())


class TestWeights:
    def test_init_range_and_seed(self):
        w = weights(d_red=16, d_att=8, seed=1)
        for m in (w.w_q, w.w_k, w.w_v):
            assert m.shape == (16, 8)
            assert np.all(np.abs(m) <= 1 / 4)
        np.testing.assert_array_equal(w.w_q, weights(16, 8, 1).w_q)

    def test_save_load(self, tmp_path):
        w = weights(seed=5)
        path = tmp_path / "w.bin"
        w.save(path)
        back = AttentionWeights.load(path)
        for a, b in ((back.w_q, w.w_q), (back.w_k, w.w_k), (back.w_v, w.w_v)):
            np.testing.assert_array_equal(a, b)
        raw = path.read_bytes()
        assert raw[:4] == b"LBAW"
        # row-major: the first d_att values are row 0 of W_Q
        np.testing.assert_array_equal(np.frombuffer(raw, "<f8", 3, 16), w.w_q[0])
