import numpy as np
import pytest

from countex import autograd as ag
from countex.autograd import AttentionParams, RngStream, Tensor, backward, reset_graph_grads
from countex.errors import ConfigError, ContractError, ShapeError


def test_tensor_promotes_vectors_to_rows():
    t = Tensor(np.array([1.0, 2.0, 3.0]))
    assert t.shape == (1, 3)


def test_backward_requires_scalar_root():
    x = Tensor(np.ones((2, 2)))
    with pytest.raises(ContractError):
        backward(ag.scale(x, 2.0))


def test_sum_gradient_is_ones():
    x = Tensor(np.arange(6.0).reshape(2, 3))
    backward(ag.sum_all(x))
    assert np.array_equal(x.grad, np.ones((2, 3)))


def test_squared_norm_gradient_is_2x():
    gen = np.random.default_rng(0)
    x = Tensor(gen.standard_normal((3, 4)))
    backward(ag.sum_all(ag.power(x, 2.0)))
    assert np.allclose(x.grad, 2.0 * x.data)


def test_linear_identity_and_hand_case():
    x = Tensor(np.array([[1.0, 2.0]]))
    w = Tensor(np.eye(2))
    out = ag.linear(x, w, Tensor(np.zeros((1, 2))))
    assert np.array_equal(out.data, [[1.0, 2.0]])

    x = Tensor(np.array([[1.0, 0.0], [0.0, 1.0]]))
    w = Tensor(np.array([[2.0, 0.0], [0.0, 3.0]]))
    b = Tensor(np.array([[1.0, 1.0]]))
    out = ag.linear(x, w, b)
    assert np.array_equal(out.data, [[3.0, 1.0], [1.0, 4.0]])


def test_linear_bias_gradient_counts_rows():
    gen = np.random.default_rng(1)
    x = Tensor(gen.standard_normal((5, 3)))
    w = Tensor(gen.standard_normal((3, 2)))
    b = Tensor(np.zeros((1, 2)))
    backward(ag.sum_all(ag.linear(x, w, b)))
    assert np.allclose(b.grad, np.full((1, 2), 5.0))


def test_layer_norm_constant_row_maps_to_shift():
    gain = Tensor(np.ones((1, 4)))
    shift = Tensor(np.zeros((1, 4)))
    out = ag.layer_norm(Tensor(np.full((1, 4), 5.0)), gain, shift)
    assert np.allclose(out.data, 0.0)


def test_layer_norm_two_point_row():
    gain = Tensor(np.ones((1, 2)))
    shift = Tensor(np.zeros((1, 2)))
    out = ag.layer_norm(Tensor(np.array([[1.0, -1.0]])), gain, shift, eps=0.0)
    assert np.allclose(out.data, [[1.0, -1.0]])


def test_layer_norm_rejects_single_column():
    gain = Tensor(np.ones((1, 1)))
    shift = Tensor(np.zeros((1, 1)))
    with pytest.raises(ShapeError):
        ag.layer_norm(Tensor(np.ones((3, 1))), gain, shift)


def test_softmax_symmetry_and_log_weights():
    out = ag.softmax_rows(Tensor(np.array([[0.0, 0.0]])))
    assert np.allclose(out.data, [[0.5, 0.5]])

    out = ag.softmax_rows(Tensor(np.log(np.array([[1.0, 2.0, 3.0]]))))
    assert np.allclose(out.data, [[1 / 6, 2 / 6, 3 / 6]])


def test_softmax_shift_invariance_no_overflow():
    out = ag.softmax_rows(Tensor(np.array([[1000.0, 1000.0, 1000.0]])))
    assert np.allclose(out.data, [[1 / 3, 1 / 3, 1 / 3]])
    assert np.all(np.isfinite(out.data))


def test_cosine_hand_values():
    one = ag.cosine_similarity(Tensor(np.array([[1.0, 0.0]])), Tensor(np.array([[1.0, 0.0]])))
    zero = ag.cosine_similarity(Tensor(np.array([[1.0, 0.0]])), Tensor(np.array([[0.0, 1.0]])))
    diag = ag.cosine_similarity(Tensor(np.array([[1.0, 1.0]])), Tensor(np.array([[1.0, 0.0]])))
    assert np.isclose(one.data[0, 0], 1.0)
    assert np.isclose(zero.data[0, 0], 0.0)
    assert np.isclose(diag.data[0, 0], 1.0 / np.sqrt(2.0))


def test_cosine_matrix_zero_row_is_zero_not_nan():
    a = Tensor(np.array([[0.0, 0.0], [1.0, 0.0]]))
    b = Tensor(np.array([[1.0, 0.0]]))
    out = ag.cosine_matrix(a, b)
    assert np.allclose(out.data, [[0.0], [1.0]])
    backward(ag.sum_all(out))
    assert np.all(np.isfinite(a.grad))


def test_rowmax_picks_first_of_ties_for_gradient():
    x = Tensor(np.array([[3.0, 3.0, 1.0]]))
    out = ag.rowmax(x)
    assert out.data[0, 0] == 3.0
    backward(ag.sum_all(out))
    assert np.array_equal(x.grad, [[1.0, 0.0, 0.0]])


def test_clamp_gradient_dead_outside_interval():
    x = Tensor(np.array([[0.5, 2.0, -1.0]]))
    backward(ag.sum_all(ag.clamp(x, 0.0, 1.0)))
    assert np.array_equal(x.grad, [[1.0, 0.0, 0.0]])


def test_power_zero_exponent_has_zero_gradient():
    x = Tensor(np.array([[2.0, 3.0]]))
    out = ag.power(x, 0.0)
    assert np.allclose(out.data, 1.0)
    backward(ag.sum_all(out))
    assert np.array_equal(x.grad, np.zeros((1, 2)))


def test_gather_rows_accumulates_duplicate_indices():
    x = Tensor(np.arange(6.0).reshape(3, 2))
    out = ag.gather_rows(x, [1, 1, 0])
    backward(ag.sum_all(out))
    assert np.array_equal(x.grad, [[1.0, 1.0], [2.0, 2.0], [0.0, 0.0]])


def test_concat_and_slice_route_gradients():
    a = Tensor(np.ones((2, 2)))
    b = Tensor(np.ones((1, 2)))
    both = ag.concat_rows([a, b])
    assert both.shape == (3, 2)
    backward(ag.sum_all(ag.slice_cols(both, 0, 1)))
    assert np.array_equal(a.grad, [[1.0, 0.0], [1.0, 0.0]])
    assert np.array_equal(b.grad, [[1.0, 0.0]])


def test_attention_single_key_ignores_scores():
    gen = np.random.default_rng(2)
    d = 8
    params = AttentionParams.create(RngStream(0, "attn"), d, 2)
    q = Tensor(gen.standard_normal((3, d)))
    k = Tensor(gen.standard_normal((1, d)))
    v = Tensor(gen.standard_normal((1, d)))
    out = ag.multi_head_attention(q, k, v, params)
    projected = ag.matmul(ag.matmul(v, params.wv), params.wo)
    assert np.allclose(out.data, np.repeat(projected.data, 3, axis=0))


def test_attention_identity_projections_weighted_average():
    d = 2
    params = AttentionParams(
        wq=Tensor(np.eye(d)), wk=Tensor(np.eye(d)), wv=Tensor(np.eye(d)),
        wo=Tensor(np.eye(d)), heads=1,
    )
    q = np.array([[1.0, 0.0], [0.0, 1.0]])
    k = np.array([[2.0, 0.0], [0.0, 2.0]])
    out = ag.multi_head_attention(Tensor(q), Tensor(k), Tensor(k), params)
    logits = q @ k.T / np.sqrt(d)
    weights = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
    assert np.allclose(out.data, weights @ k)


def test_attention_key_value_permutation_invariance():
    gen = np.random.default_rng(3)
    d = 8
    params = AttentionParams.create(RngStream(1, "attn"), d, 4)
    q = Tensor(gen.standard_normal((4, d)))
    kv = gen.standard_normal((6, d))
    perm = gen.permutation(6)
    out = ag.multi_head_attention(q, Tensor(kv), Tensor(kv), params)
    out_p = ag.multi_head_attention(q, Tensor(kv[perm]), Tensor(kv[perm]), params)
    assert np.allclose(out.data, out_p.data, atol=1e-12)


def test_attention_rejects_indivisible_heads():
    with pytest.raises(ConfigError):
        AttentionParams.create(RngStream(0, "attn"), 10, 3)


def test_dropout_train_scales_and_eval_is_identity():
    gen = np.random.default_rng(4)
    x = Tensor(np.ones((100, 10)))
    out = ag.dropout(x, 0.5, gen)
    kept = out.data != 0.0
    assert np.allclose(out.data[kept], 2.0)
    assert 0.3 < kept.mean() < 0.7
    with pytest.raises(ConfigError):
        ag.dropout(x, 1.5, gen)


def test_repeated_backward_after_reset_is_bit_identical():
    gen = np.random.default_rng(5)
    x = Tensor(gen.standard_normal((4, 4)))
    w = Tensor(gen.standard_normal((4, 4)))
    root = ag.sum_all(ag.softmax_rows(ag.matmul(x, w)))
    backward(root)
    first = {id(t): t.grad.copy() for t in (x, w)}
    reset_graph_grads(root)
    assert np.array_equal(x.grad, np.zeros((4, 4)))
    backward(root)
    assert np.array_equal(x.grad, first[id(x)])
    assert np.array_equal(w.grad, first[id(w)])


def test_grads_accumulate_across_graphs_sharing_a_leaf():
    x = Tensor(np.ones((2, 2)))
    backward(ag.sum_all(x))
    backward(ag.scale(ag.sum_all(x), 2.0))
    assert np.array_equal(x.grad, np.full((2, 2), 3.0))


def test_rng_stream_is_label_and_seed_keyed():
    a = RngStream(0, "alpha").generator().standard_normal(5)
    b = RngStream(0, "alpha").generator().standard_normal(5)
    c = RngStream(0, "beta").generator().standard_normal(5)
    d = RngStream(1, "alpha").generator().standard_normal(5)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)
    assert not np.array_equal(a, d)


def test_rng_stream_child_extends_label():
    child = RngStream(0, "root").child("leaf")
    assert child.label == "root/leaf"
    assert np.array_equal(
        child.generator().standard_normal(3),
        RngStream(0, "root/leaf").generator().standard_normal(3),
    )
