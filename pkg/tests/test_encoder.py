import numpy as np
import pytest

from countex import autograd as ag
from countex.autograd import RngStream, Tensor, backward
from countex.config import parse_mask
from countex.encoder import (
    EncoderParams,
    cell_feature_grid,
    encode_prompt,
    encode_query_sets,
    positional_rows,
    text_tokens,
)
from countex.errors import ContractError
from countex.scenes import PromptSpec, build_prompt


@pytest.fixture
def enc(tiny_cfg):
    return EncoderParams.create(RngStream(0, "enc"), tiny_cfg)


def test_text_tokens_distinct_within_pair(tiny_cfg, tiny_universe):
    vid = tiny_universe.variant_ids()[0]
    sib = tiny_universe.sibling(vid)
    a = text_tokens(tiny_universe, vid, tiny_cfg.n_categories)
    b = text_tokens(tiny_universe, sib, tiny_cfg.n_categories)
    assert a[0] == b[0]
    assert a[1] != b[1]
    assert all(t < tiny_cfg.n_categories + tiny_cfg.n_attributes for t in (a + b))


def test_prompt_sequence_lengths(tiny_cfg, tiny_universe, enc, make_scene):
    scene = make_scene(0)
    feat_dim = scene.instances[0].features.shape[0]
    ex = np.stack([scene.instances[0].features] * 3)

    null_only = encode_prompt(None, np.zeros((0, feat_dim)), enc, tiny_universe)
    assert null_only.shape[0] == 1

    text_only = encode_prompt(scene.positive_category, np.zeros((0, feat_dim)), enc, tiny_universe)
    assert text_only.shape[0] == 2

    both = encode_prompt(scene.positive_category, ex, enc, tiny_universe)
    assert both.shape[0] == 5

    with pytest.raises(ContractError):
        encode_prompt(scene.positive_category, ex[:2], enc, tiny_universe)


def test_null_token_used_for_exemplars_without_text(tiny_cfg, tiny_universe, enc, make_scene):
    scene = make_scene(1)
    ex = np.stack([scene.instances[0].features] * 3)
    out = encode_prompt(None, ex, enc, tiny_universe)
    assert out.shape[0] == 4
    assert np.array_equal(out.data[0], enc.embed.data[enc.null_token])


def test_identical_conditioning_gives_identical_query_sets(tiny_cfg, tiny_universe, enc, make_scene):
    scene = make_scene(2)
    prompt = PromptSpec(
        positive_text=scene.positive_category,
        positive_exemplars=np.zeros((0, scene.instances[0].features.shape[0])),
        negative_text=scene.positive_category,
        negative_exemplars=np.zeros((0, scene.instances[0].features.shape[0])),
    )
    pos_q, neg_q, _ = encode_query_sets(scene, prompt, enc, tiny_universe)
    assert neg_q is not None
    assert np.array_equal(pos_q.data, neg_q.data)


def test_absent_negative_returns_none(tiny_cfg, tiny_universe, enc, make_scene):
    scene = make_scene(3)
    prompt = build_prompt(scene, parse_mask("t_pos"), 0)
    pos_q, neg_q, cond = encode_query_sets(scene, prompt, enc, tiny_universe)
    assert neg_q is None
    assert pos_q.shape == (tiny_cfg.n_queries, tiny_cfg.embed_dim)
    assert cond.shape[0] == 2


def test_instance_permutation_leaves_queries_unchanged(tiny_cfg, tiny_universe, enc, make_scene):
    import dataclasses

    scene = make_scene(4)
    gen = np.random.default_rng(0)
    perm = gen.permutation(len(scene.instances))
    shuffled = dataclasses.replace(scene, instances=[scene.instances[int(i)] for i in perm])
    prompt = build_prompt(scene, parse_mask("t_pos+t_neg"), 0)
    q_a, _, _ = encode_query_sets(scene, prompt, enc, tiny_universe)
    q_b, _, _ = encode_query_sets(shuffled, prompt, enc, tiny_universe)
    assert np.allclose(q_a.data, q_b.data, atol=1e-12)


def test_queries_depend_on_conditioning_embeddings(tiny_cfg, tiny_universe, enc, make_scene):
    scene = make_scene(5)
    prompt = build_prompt(scene, parse_mask("t_pos"), 0)
    pos_q, _, _ = encode_query_sets(scene, prompt, enc, tiny_universe)
    backward(ag.sum_all(pos_q))
    assert np.abs(enc.embed.grad).sum() > 0.0

    h = 1e-5
    tok = text_tokens(tiny_universe, scene.positive_category, tiny_cfg.n_categories)[0]
    base = enc.embed.data[tok, 0]
    analytic = enc.embed.grad[tok, 0]
    enc.embed.data[tok, 0] = base + h
    up, _, _ = encode_query_sets(scene, prompt, enc, tiny_universe)
    enc.embed.data[tok, 0] = base - h
    down, _, _ = encode_query_sets(scene, prompt, enc, tiny_universe)
    enc.embed.data[tok, 0] = base
    numeric = (up.data.sum() - down.data.sum()) / (2 * h)
    assert abs(analytic - numeric) / max(1.0, abs(analytic), abs(numeric)) < 1e-4


def test_positional_rows_bounded_and_distinct(tiny_cfg):
    centers = np.array([[0.0, 0.0], [12.0, 7.0], [23.0, 23.0]])
    rows = positional_rows(centers, (24, 24), 16)
    assert rows.shape == (3, 16)
    assert np.all(np.abs(rows) <= 1.0 + 1e-12)
    assert not np.allclose(rows[0], rows[1])


def test_cell_feature_grid_scatters_instances(make_scene):
    scene = make_scene(6)
    grid = cell_feature_grid(scene)
    h, w = scene.grid_hw
    assert grid.shape == (h * w, scene.instances[0].features.shape[0])
    r, c = scene.instances[0].center
    row = grid[int(r) * w + int(c)]
    assert np.abs(row).sum() > 0.0
    occupied = {int(i.center[0]) * w + int(i.center[1]) for i in scene.instances}
    empty = next(i for i in range(h * w) if i not in occupied)
    assert np.all(grid[empty] == 0.0)
