import dataclasses

import numpy as np
import pytest

from countex import autograd as ag
from countex.autograd import AttentionParams, RngStream, Tensor, backward
from countex.errors import ContractError
from countex.refinement import (
    PrototypeBank,
    RefinementParams,
    diversity_loss,
    dqr_forward,
    extract_exclusive,
    extract_exclusive_literal,
    identify_shared,
    orthonormal_rows,
    refine_queries,
    shareability_loss,
)


@pytest.fixture
def params(tiny_cfg):
    return RefinementParams.create(RngStream(0, "refine"), tiny_cfg)


def make_bank(rows: np.ndarray) -> PrototypeBank:
    fused = Tensor(rows)
    basis, kept = orthonormal_rows(fused)
    return PrototypeBank(fused=fused, basis=basis, kept_rows=kept)


def rand_queries(gen, n, d):
    return Tensor(gen.standard_normal((n, d)))


# ---------------------------------------------------------------------------
# stage 1: shared-prototype identification


def test_identify_shared_symmetric_under_query_set_swap(params, tiny_cfg):
    gen = np.random.default_rng(0)
    pos = rand_queries(gen, 6, tiny_cfg.embed_dim)
    neg = rand_queries(gen, 6, tiny_cfg.embed_dim)
    a = identify_shared(pos, neg, params)
    b = identify_shared(neg, pos, params)
    assert np.allclose(a.fused.data, b.fused.data, atol=1e-12)


def test_identify_shared_equal_sets_match_duplicated_set(params, tiny_cfg):
    gen = np.random.default_rng(1)
    q = rand_queries(gen, 5, tiny_cfg.embed_dim)
    a = identify_shared(q, q, params)
    b = identify_shared(q, Tensor(q.data.copy()), params)
    assert np.allclose(a.fused.data, b.fused.data)
    sim = ag.cosine_matrix(a.fused, q)
    sim_b = ag.cosine_matrix(b.fused, q)
    assert np.allclose(sim.data, sim_b.data)


def test_single_direction_queries_give_rank_one_bank(tiny_cfg, params):
    gen = np.random.default_rng(2)
    v = gen.standard_normal(tiny_cfg.embed_dim)
    q = Tensor(np.tile(v, (4, 1)))
    bank = identify_shared(q, q, params)
    # attention over identical rows averages them, so every fused row is the
    # image of v under the same map: the span collapses to one direction
    assert bank.basis is not None
    assert bank.basis.shape[0] == 1
    assert len(bank.kept_rows) == 1


# ---------------------------------------------------------------------------
# shareability and diversity losses


def test_shareability_floor_reached_at_coincidence():
    rows = np.eye(3, 8)
    bank = make_bank(rows)
    loss = shareability_loss(bank, Tensor(rows.copy()), Tensor(rows.copy()))
    assert np.isclose(loss.data[0, 0], -2.0)


def test_shareability_orthogonal_prototype_contributes_nothing():
    bank_rows = np.eye(2, 6)
    queries = np.zeros((2, 6))
    queries[:, 2:4] = np.eye(2)
    full = shareability_loss(make_bank(bank_rows), Tensor(queries), Tensor(queries))
    assert np.isclose(full.data[0, 0], 0.0)


def test_shareability_matches_brute_force_enumeration():
    gen = np.random.default_rng(3)
    fused = gen.standard_normal((2, 5))
    pos = gen.standard_normal((4, 5))
    neg = gen.standard_normal((3, 5))
    loss = shareability_loss(make_bank(fused), Tensor(pos), Tensor(neg))

    def cos(a, b):
        return a @ b / (np.linalg.norm(a) * np.linalg.norm(b) + 1e-12)

    total = 0.0
    for j in range(2):
        total += max(cos(fused[j], p) for p in pos)
        total += max(cos(fused[j], q) for q in neg)
    assert np.isclose(loss.data[0, 0], -total / 2)


def test_diversity_zero_iff_orthonormal():
    assert np.isclose(diversity_loss(Tensor(np.eye(3, 7))).data[0, 0], 0.0)
    two_same = np.tile(np.array([[1.0, 0.0]]), (2, 1))
    assert np.isclose(diversity_loss(Tensor(two_same)).data[0, 0], 2.0)


def test_diversity_gradient_matches_closed_form():
    gen = np.random.default_rng(4)
    c = Tensor(gen.standard_normal((3, 5)))
    backward(diversity_loss(c))
    gram = c.data @ c.data.T
    expected = 4.0 * (gram - np.eye(3)) @ c.data
    assert np.allclose(c.grad, expected)


# ---------------------------------------------------------------------------
# orthonormalization and projection


def test_orthonormal_rows_spans_and_drops_rank():
    c = Tensor(np.array([[2.0, 0.0, 0.0], [1.0, 1.0, 0.0], [3.0, 1.0, 0.0]]))
    basis, kept = orthonormal_rows(c)
    assert kept == [0, 1]
    b = basis.data
    assert np.allclose(b @ b.T, np.eye(2), atol=1e-12)
    # third row lies in the span of the first two
    coeffs = b @ c.data[2]
    assert np.allclose(coeffs @ b, c.data[2], atol=1e-12)


def test_orthonormal_rows_all_zero_returns_none():
    basis, kept = orthonormal_rows(Tensor(np.zeros((3, 4))))
    assert basis is None
    assert kept == []


def test_selection_hand_example_and_tie_breaks():
    # exclusivity scores (0.9, 0.1, 0.5) with m=2 select indices {1, 2}
    d = 4
    fused = np.zeros((1, d))
    fused[0, 0] = 1.0
    sigmas = [0.9, 0.1, 0.5]
    neg = np.zeros((3, d))
    for i, s in enumerate(sigmas):
        neg[i, 0] = s
        neg[i, 1] = np.sqrt(1 - s * s)
    refs = extract_exclusive(Tensor(neg), make_bank(fused), m=2)
    assert refs.selection.indices.tolist() == [1, 2]
    assert np.allclose(refs.selection.scores, sigmas)

    # exact ties resolve toward ascending index
    tied = np.tile(neg[2], (3, 1))
    refs = extract_exclusive(Tensor(tied), make_bank(fused), m=2)
    assert refs.selection.indices.tolist() == [0, 1]


def test_selection_matches_brute_force_sort():
    gen = np.random.default_rng(5)
    fused = gen.standard_normal((3, 6))
    for _ in range(200):
        neg = gen.standard_normal((7, 6))
        m = int(gen.integers(1, 8))
        refs = extract_exclusive(Tensor(neg), make_bank(fused), m)
        scores = refs.selection.scores
        expected = sorted(range(7), key=lambda i: (scores[i], i))[:m]
        assert refs.selection.indices.tolist() == sorted(expected)


def test_selection_rejects_bad_m():
    bank = make_bank(np.eye(2, 4))
    with pytest.raises(ContractError):
        extract_exclusive(Tensor(np.eye(3, 4)), bank, m=0)
    with pytest.raises(ContractError):
        extract_exclusive(Tensor(np.eye(3, 4)), bank, m=4)


def test_residuals_orthogonal_to_basis_and_projection_idempotent():
    gen = np.random.default_rng(6)
    fused = gen.standard_normal((3, 8))
    bank = make_bank(fused)
    neg = Tensor(gen.standard_normal((5, 8)))
    refs = extract_exclusive(neg, bank, m=3)
    r = refs.rows.data
    assert np.abs(r @ bank.basis.data.T).max() < 1e-6
    # projecting the residual again changes nothing
    again = r - (r @ bank.basis.data.T) @ bank.basis.data
    assert np.abs(again - r).max() < 1e-10


def test_residual_annihilates_span_and_keeps_complement():
    basis_rows = np.eye(2, 6)
    bank = make_bank(basis_rows)
    in_span = np.array([[0.3, -0.7, 0, 0, 0, 0]])
    orth = np.array([[0, 0, 0.5, 0.5, 0, 0]])
    neg = Tensor(np.vstack([in_span, orth]))
    refs = extract_exclusive(neg, bank, m=2)
    by_index = {int(i): row for i, row in zip(refs.selection.indices, refs.rows.data)}
    assert np.linalg.norm(by_index[0]) < 1e-8
    assert np.allclose(by_index[1], orth[0])


def test_literal_variant_keeps_shared_component_for_correlated_rows():
    gen = np.random.default_rng(7)
    base = gen.standard_normal(6)
    fused = np.vstack([base, base * 0.9 + 0.1 * gen.standard_normal(6)])
    neg = Tensor(gen.standard_normal((4, 6)))
    bank = make_bank(fused)
    proper = extract_exclusive(neg, bank, m=4)
    literal = extract_exclusive_literal(neg, bank, m=4)
    # the orthonormal projection leaves nothing along the span; the literal
    # subtraction does for correlated fused rows
    b = bank.basis.data
    assert np.abs(proper.rows.data @ b.T).max() < 1e-6
    assert np.abs(literal.rows.data @ b.T).max() > 1e-3


# ---------------------------------------------------------------------------
# stage 3: gated refinement


def test_gate_zero_is_exact_layer_norm_identity(params, tiny_cfg):
    gen = np.random.default_rng(8)
    pos = rand_queries(gen, 6, tiny_cfg.embed_dim)
    neg = rand_queries(gen, 6, tiny_cfg.embed_dim)
    out = dqr_forward(pos, neg, params)
    expected = params.refine_norm.apply(pos)
    assert np.array_equal(out.refined.data, expected.data)


def test_suppression_bounded_by_gate_times_attended(tiny_cfg, params):
    gen = np.random.default_rng(9)
    d = tiny_cfg.embed_dim
    pos = rand_queries(gen, 5, d)
    neg = rand_queries(gen, 5, d)
    params.gate.data[0, 0] = 0.25
    bank = identify_shared(pos, neg, params)
    refs = extract_exclusive(neg, bank, params.n_exclusive)
    attended = ag.multi_head_attention(
        pos, refs.rows, refs.rows, params.refine_attention
    )
    refined = refine_queries(pos, refs, params)
    base = params.refine_norm.apply(pos)
    # the pre-normalization shift is exactly gate * attended; compare the
    # normalized outputs against the norm of that shift
    shifted = params.refine_norm.apply(ag.sub(pos, ag.mul(attended, params.gate)))
    assert np.array_equal(refined.data, shifted.data)
    assert np.linalg.norm(pos.data - (pos.data - 0.25 * attended.data)) <= (
        0.25 * np.linalg.norm(attended.data) + 1e-12
    )


def test_near_duplicate_rows_attenuate_more_than_orthogonal(tiny_cfg):
    d = tiny_cfg.embed_dim
    gen = np.random.default_rng(10)
    ref_dir = np.zeros(d)
    ref_dir[0] = 1.0
    orth_dir = np.zeros(d)
    orth_dir[1] = 1.0
    pos_rows = np.vstack([ref_dir + 0.01 * gen.standard_normal(d), orth_dir])
    refs_rows = np.tile(ref_dir, (2, 1))

    identity = AttentionParams(
        wq=Tensor(np.eye(d)), wk=Tensor(np.eye(d)), wv=Tensor(np.eye(d)),
        wo=Tensor(np.eye(d)), heads=1,
    )
    cfg = dataclasses.replace(tiny_cfg, dropout_rate=0.0)
    params = RefinementParams.create(RngStream(0, "refine"), cfg)
    params.refine_attention = identity
    params.gate.data[0, 0] = 0.5

    # with identity projections every query attends onto the same reference
    # row, so the subtraction direction is ref_dir for both; only the
    # duplicate row loses its content
    pre = pos_rows - 0.5 * np.tile(ref_dir, (2, 1))
    drop = np.linalg.norm(pos_rows - pre, axis=1)
    assert np.isclose(drop[0], drop[1])
    dup_loss = np.linalg.norm(pos_rows[0]) - np.linalg.norm(pre[0])
    orth_loss = np.linalg.norm(pos_rows[1]) - np.linalg.norm(pre[1])
    assert dup_loss > orth_loss


# ---------------------------------------------------------------------------
# full forward


def test_dqr_bypass_without_negative(params, tiny_cfg):
    gen = np.random.default_rng(11)
    pos = rand_queries(gen, 6, tiny_cfg.embed_dim)
    out = dqr_forward(pos, None, params)
    assert out.trace.bypassed
    assert out.share_loss.data[0, 0] == 0.0
    assert out.div_loss.data[0, 0] == 0.0
    expected = params.refine_norm.apply(pos)
    assert np.array_equal(out.refined.data, expected.data)


def test_dqr_shape_mismatch_raises(params, tiny_cfg):
    gen = np.random.default_rng(12)
    with pytest.raises(ContractError):
        dqr_forward(
            rand_queries(gen, 6, tiny_cfg.embed_dim),
            rand_queries(gen, 5, tiny_cfg.embed_dim),
            params,
        )


def test_dqr_training_mode_requires_generator(params, tiny_cfg):
    gen = np.random.default_rng(13)
    pos = rand_queries(gen, 6, tiny_cfg.embed_dim)
    neg = rand_queries(gen, 6, tiny_cfg.embed_dim)
    with pytest.raises(ContractError):
        dqr_forward(pos, neg, params, training=True, gen=None)


def test_dqr_eval_passes_are_bit_identical(params, tiny_cfg):
    gen = np.random.default_rng(14)
    pos = rand_queries(gen, 6, tiny_cfg.embed_dim)
    neg = rand_queries(gen, 6, tiny_cfg.embed_dim)
    params.gate.data[0, 0] = 0.3
    a = dqr_forward(pos, neg, params)
    b = dqr_forward(pos, neg, params)
    assert np.array_equal(a.refined.data, b.refined.data)
    assert np.array_equal(a.share_loss.data, b.share_loss.data)
