"""Kernel feature maps, associative memory, linear vs exact attention."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import exact_attention_naive
from shapestream.attention import (
    EPS_DENOM,
    AssociativeMemory,
    KernelFeatureMap,
    causal_linear_attention,
    causal_linear_attention_t,
    exact_causal_attention,
    exact_causal_attention_t,
    feature_map,
    feature_map_apply,
    feature_map_apply_t,
    memory_query,
    memory_update,
)
from shapestream.autograd import Tensor

RNG = np.random.default_rng


# ---------------------------------------------------------------------------
# feature maps
# ---------------------------------------------------------------------------


def test_relu_map_is_elementwise_max():
    fmap = feature_map("relu", d_qk=3)
    np.testing.assert_array_equal(
        feature_map_apply(fmap, np.array([-1.0, 2.0, 0.0])), [0.0, 2.0, 0.0]
    )


def test_relu_map_requires_m_equal_dqk():
    with pytest.raises(ValueError, match="m == d_qk"):
        KernelFeatureMap(kind="relu", d_qk=3, m=5)


def test_softmax_map_at_zero_gives_exactly_one():
    # phi(0) entries are all 1/sqrt(m), so phi(0).phi(0) == 1 for any draw
    for seed in range(5):
        fmap = feature_map("softmax", d_qk=4, m=16, seed=seed)
        p = feature_map_apply(fmap, np.zeros(4))
        assert p.shape == (16,)
        np.testing.assert_allclose(float(p @ p), 1.0, rtol=0, atol=1e-15)


def test_softmax_map_strictly_positive_and_seed_reproducible():
    fmap1 = feature_map("softmax", d_qk=6, m=32, seed=123)
    fmap2 = feature_map("softmax", d_qk=6, m=32, seed=123)
    np.testing.assert_array_equal(fmap1.projection, fmap2.projection)
    x = RNG(0).standard_normal(6) * 3
    assert np.all(feature_map_apply(fmap1, x) > 0)


def test_softmax_map_unbiased_kernel_estimate():
    # fixed unit-norm q, k with q.k = 0.5; mean over many maps ~ exp(0.5)
    q = np.zeros(8)
    q[0] = 1.0
    k = np.zeros(8)
    k[0] = 0.5
    k[1] = np.sqrt(1 - 0.25)
    draws = 10_000
    estimates = np.empty(draws)
    for s in range(draws):
        fmap = feature_map("softmax", d_qk=8, m=64, seed=s)
        estimates[s] = feature_map_apply(fmap, q) @ feature_map_apply(fmap, k)
    mean = estimates.mean()
    sem = estimates.std(ddof=1) / np.sqrt(draws)
    assert abs(mean - np.exp(0.5)) < 3 * sem


def test_feature_map_dimension_mismatch_rejected():
    fmap = feature_map("relu", d_qk=3)
    with pytest.raises(ValueError, match="dim"):
        feature_map_apply(fmap, np.zeros(4))


def test_orthogonal_projection_rows_orthogonal_per_block():
    fmap = feature_map("softmax", d_qk=8, m=16, seed=5, orthogonal=True)
    block = fmap.projection[:8]
    gram = block @ block.T
    off = gram - np.diag(np.diag(gram))
    assert np.max(np.abs(off)) < 1e-9


# ---------------------------------------------------------------------------
# associative memory
# ---------------------------------------------------------------------------


def test_fresh_memory_all_zero():
    mem = AssociativeMemory.fresh(feature_map("relu", d_qk=4), d=6)
    assert mem.count == 0
    assert not mem.M.any() and not mem.m_vec.any()


def test_single_update_is_outer_product():
    fmap = feature_map("relu", d_qk=3)
    mem = AssociativeMemory.fresh(fmap, d=2)
    k = np.array([1.0, -2.0, 0.5])
    v = np.array([3.0, 4.0])
    memory_update(mem, k, v)
    assert mem.count == 1
    np.testing.assert_allclose(mem.M, np.outer([1.0, 0.0, 0.5], v))
    np.testing.assert_allclose(mem.m_vec, [1.0, 0.0, 0.5])


def test_single_frame_query_returns_value_exactly():
    fmap = feature_map("relu", d_qk=3)
    mem = AssociativeMemory.fresh(fmap, d=4)
    rng = RNG(1)
    k = np.abs(rng.standard_normal(3)) + 0.1
    v = rng.standard_normal(4)
    memory_update(mem, k, v)
    q = np.abs(rng.standard_normal(3)) + 0.1  # phi(q).phi(k) > 0
    np.testing.assert_allclose(memory_query(mem, q), v, rtol=0, atol=1e-14)


def test_two_equal_keys_query_returns_mean():
    fmap = feature_map("relu", d_qk=2)
    mem = AssociativeMemory.fresh(fmap, d=3)
    k = np.array([1.0, 1.0])
    v1 = np.array([1.0, 0.0, 2.0])
    v2 = np.array([0.0, 4.0, -2.0])
    memory_update(mem, k, v1)
    memory_update(mem, k, v2)
    np.testing.assert_allclose(memory_query(mem, k), (v1 + v2) / 2, atol=1e-14)


def test_weighted_two_frame_retrieval_hand_case():
    # relu kind: k1=(1,0), k2=(0,1), q=(2,1) -> weights (2,1) -> (2 v1 + v2)/3
    fmap = feature_map("relu", d_qk=2)
    mem = AssociativeMemory.fresh(fmap, d=2)
    v1 = np.array([1.0, 5.0])
    v2 = np.array([-3.0, 0.5])
    memory_update(mem, np.array([1.0, 0.0]), v1)
    memory_update(mem, np.array([0.0, 1.0]), v2)
    got = memory_query(mem, np.array([2.0, 1.0]))
    np.testing.assert_allclose(got, (2 * v1 + v2) / 3, atol=1e-14)


def test_memory_storage_independent_of_history_length():
    fmap = feature_map("softmax", d_qk=4, m=8, seed=0)
    sizes = []
    for length in (1, 10, 100):
        mem = AssociativeMemory.fresh(fmap, d=6)
        rng = RNG(length)
        for _ in range(length):
            memory_update(mem, rng.standard_normal(4), rng.standard_normal(6))
        sizes.append(mem.nbytes)
    assert sizes[0] == sizes[1] == sizes[2]


def test_non_finite_update_rejected_memory_unmodified():
    fmap = feature_map("relu", d_qk=2)
    mem = AssociativeMemory.fresh(fmap, d=2)
    memory_update(mem, np.ones(2), np.ones(2))
    before_m, before_vec = mem.M.copy(), mem.m_vec.copy()
    with pytest.raises(ValueError, match="non-finite"):
        memory_update(mem, np.array([np.nan, 1.0]), np.ones(2))
    np.testing.assert_array_equal(mem.M, before_m)
    np.testing.assert_array_equal(mem.m_vec, before_vec)
    assert mem.count == 1


def test_query_of_empty_memory_rejected():
    mem = AssociativeMemory.fresh(feature_map("relu", d_qk=2), d=2)
    with pytest.raises(ValueError, match="empty"):
        memory_query(mem, np.ones(2))


# ---------------------------------------------------------------------------
# exact attention (the quadratic oracle is itself checked against a naive loop)
# ---------------------------------------------------------------------------


def test_exact_attention_equal_keys_gives_running_mean():
    rng = RNG(2)
    L, d = 5, 3
    K = np.tile(rng.standard_normal(3), (L, 1))
    Q = rng.standard_normal((L, 3))
    V = rng.standard_normal((L, d))
    out = exact_causal_attention(Q, K, V, kernel="softmax")
    for i in range(L):
        np.testing.assert_allclose(out[i], V[: i + 1].mean(axis=0), atol=1e-12)


def test_exact_attention_two_step_hand_case():
    # q2.k1 = ln 3, q2.k2 = 0 -> row 2 = (3 v1 + v2) / 4
    Q = np.array([[1.0], [np.log(3.0)]])
    K = np.array([[1.0], [0.0]])
    V = np.array([[2.0, 0.0], [6.0, 4.0]])
    out = exact_causal_attention(Q, K, V, kernel="softmax")
    np.testing.assert_allclose(out[0], V[0], atol=1e-14)
    np.testing.assert_allclose(out[1], (3 * V[0] + V[1]) / 4, atol=1e-12)


def test_exact_attention_matches_naive_double_loop():
    rng = RNG(3)
    for kernel in ("softmax", "relu"):
        Q = rng.standard_normal((7, 4))
        K = rng.standard_normal((7, 4))
        V = rng.standard_normal((7, 5))
        np.testing.assert_allclose(
            exact_causal_attention(Q, K, V, kernel),
            exact_attention_naive(Q, K, V, kernel),
            atol=1e-12,
        )


def test_softmax_rows_live_in_prefix_convex_hull():
    rng = RNG(4)
    for _ in range(1000):
        L, d = int(rng.integers(1, 6)), 3
        Q = rng.standard_normal((L, 2))
        K = rng.standard_normal((L, 2))
        V = rng.standard_normal((L, d))
        out = exact_causal_attention(Q, K, V, kernel="softmax")
        for i in range(L):
            # recompute weights independently; positive and normalized
            w = np.exp(K[: i + 1] @ Q[i])
            w = w / w.sum()
            assert np.all(w > 0)
            np.testing.assert_allclose(w.sum(), 1.0, atol=1e-12)
            np.testing.assert_allclose(out[i], w @ V[: i + 1], atol=1e-9)
            assert np.all(out[i] <= V[: i + 1].max(axis=0) + 1e-9)
            assert np.all(out[i] >= V[: i + 1].min(axis=0) - 1e-9)


def test_relu_all_zero_weights_falls_back_to_current_value():
    Q = np.array([[-1.0, -1.0]])
    K = np.array([[1.0, 1.0]])
    V = np.array([[42.0, -7.0]])
    out = exact_causal_attention(Q, K, V, kernel="relu")
    np.testing.assert_array_equal(out[0], V[0])


def test_empty_sequence_rejected():
    empty = np.zeros((0, 3))
    with pytest.raises(ValueError, match="empty"):
        exact_causal_attention(empty, empty, empty)
    fmap = feature_map("relu", d_qk=3)
    with pytest.raises(ValueError, match="empty"):
        causal_linear_attention(empty, empty, empty, fmap)


# ---------------------------------------------------------------------------
# linear attention: factorization exactness and streaming equivalence
# ---------------------------------------------------------------------------


def test_linear_relu_equals_exact_relu():
    rng = RNG(5)
    fmap = feature_map("relu", d_qk=8)
    for _ in range(20):
        L = int(rng.integers(1, 33))
        Q = rng.standard_normal((L, 8))
        K = rng.standard_normal((L, 8))
        V = rng.standard_normal((L, 8))
        got = causal_linear_attention(Q, K, V, fmap)
        want = exact_causal_attention(Q, K, V, kernel="relu")
        assert np.max(np.abs(got - want)) < 1e-10


def test_linear_single_row_returns_value():
    fmap = feature_map("softmax", d_qk=4, m=16, seed=0)
    rng = RNG(6)
    Q = rng.standard_normal((1, 4))
    K = rng.standard_normal((1, 4))
    V = rng.standard_normal((1, 5))
    np.testing.assert_allclose(causal_linear_attention(Q, K, V, fmap), V, atol=1e-12)


def test_linear_softmax_converges_to_exact_with_many_features():
    rng = RNG(7)
    L, d = 8, 6
    Q = rng.standard_normal((L, d))
    Q /= np.linalg.norm(Q, axis=1, keepdims=True)
    K = rng.standard_normal((L, d))
    K /= np.linalg.norm(K, axis=1, keepdims=True)
    V = rng.standard_normal((L, d))
    fmap = feature_map("softmax", d_qk=d, m=4096, seed=11)
    got = causal_linear_attention(Q, K, V, fmap)
    want = exact_causal_attention(Q, K, V, kernel="softmax")
    assert np.max(np.abs(got - want)) < 0.05


@settings(max_examples=30, deadline=None)
@given(
    kind=st.sampled_from(["relu", "softmax"]),
    L=st.integers(1, 24),
    d=st.integers(1, 12),
    seed=st.integers(0, 2**31),
)
def test_stream_equals_batch_property(kind, L, d, seed):
    rng = RNG(seed)
    fmap = (feature_map("relu", d_qk=d) if kind == "relu"
            else feature_map("softmax", d_qk=d, m=2 * d, seed=seed))
    Q = rng.standard_normal((L, d))
    K = rng.standard_normal((L, d))
    V = rng.standard_normal((L, d + 1))
    batch = causal_linear_attention(Q, K, V, fmap)
    mem = AssociativeMemory.fresh(fmap, d=d + 1)
    for i in range(L):
        memory_update(mem, K[i], V[i])
        streamed = memory_query(mem, Q[i], fallback=V[i])
        assert np.max(np.abs(streamed - batch[i])) < 1e-10


def test_causality_perturbation_only_affects_later_rows():
    rng = RNG(8)
    fmap = feature_map("relu", d_qk=5)
    L = 10
    Q = rng.standard_normal((L, 5))
    K = rng.standard_normal((L, 5))
    V = rng.standard_normal((L, 5))
    base = causal_linear_attention(Q, K, V, fmap)
    j = 4
    K2, V2 = K.copy(), V.copy()
    K2[j] += 1.0
    V2[j] -= 2.0
    pert = causal_linear_attention(Q, K2, V2, fmap)
    np.testing.assert_array_equal(base[:j], pert[:j])
    assert np.max(np.abs(base[j:] - pert[j:])) > 1e-6


def test_hopfield_style_nearest_neighbor_retrieval():
    # well-separated keys (pairwise dot <= 0 except self): querying with k_j
    # retrieves a vector whose best-matching value (by dot product) is v_j
    rng = RNG(9)
    d_qk, n = 8, 8
    keys = 2.0 * np.eye(n, d_qk)  # orthogonal, pairwise dot 0
    values = rng.standard_normal((n, 16))
    for j in range(n):
        out = exact_causal_attention(
            np.tile(keys[j], (n, 1)), keys, values, kernel="softmax"
        )[-1]
        scores = values @ out
        assert scores.argmax() == j


# ---------------------------------------------------------------------------
# differentiable counterparts agree with the ndarray paths
# ---------------------------------------------------------------------------


def _rows(a: np.ndarray) -> list:
    return [Tensor(a[i : i + 1]) for i in range(a.shape[0])]


def test_tensor_feature_map_matches_ndarray():
    for kind, m in (("relu", None), ("softmax", 12)):
        fmap = (feature_map("relu", d_qk=6) if kind == "relu"
                else feature_map("softmax", d_qk=6, m=m, seed=3))
        x = RNG(10).standard_normal(6)
        got = feature_map_apply_t(fmap, Tensor(x[None, :])).data[0]
        np.testing.assert_allclose(got, feature_map_apply(fmap, x), atol=1e-14)


def test_tensor_linear_attention_matches_ndarray():
    rng = RNG(11)
    L, d = 6, 4
    Q, K, V = (rng.standard_normal((L, d)) for _ in range(3))
    for fmap in (feature_map("relu", d_qk=d),
                 feature_map("softmax", d_qk=d, m=8, seed=1)):
        want = causal_linear_attention(Q, K, V, fmap)
        got = causal_linear_attention_t(_rows(Q), _rows(K), _rows(V), fmap)
        got = np.vstack([t.data for t in got])
        np.testing.assert_allclose(got, want, atol=1e-12)


def test_tensor_exact_attention_matches_ndarray():
    rng = RNG(12)
    L, d = 6, 4
    Q, K, V = (rng.standard_normal((L, d)) for _ in range(3))
    for kernel in ("softmax", "relu"):
        want = exact_causal_attention(Q, K, V, kernel)
        got = exact_causal_attention_t(_rows(Q), _rows(K), _rows(V), kernel)
        got = np.vstack([t.data for t in got])
        np.testing.assert_allclose(got, want, atol=1e-12)


def test_tensor_attention_gradients_flow_to_inputs():
    rng = RNG(13)
    L, d = 4, 3
    Q, K, V = (rng.standard_normal((L, d)) for _ in range(3))
    qs = [Tensor(Q[i : i + 1], requires_grad=True) for i in range(L)]
    ks = [Tensor(K[i : i + 1], requires_grad=True) for i in range(L)]
    vs = [Tensor(V[i : i + 1], requires_grad=True) for i in range(L)]
    fmap = feature_map("softmax", d_qk=d, m=6, seed=2)
    out = causal_linear_attention_t(qs, ks, vs, fmap)
    loss = out[0].sum()
    for t in out[1:]:
        loss = loss + t.sum()
    loss.backward()
    assert qs[0].grad is not None and ks[0].grad is not None and vs[0].grad is not None
    assert np.any(vs[0].grad != 0)
