import dataclasses
import json

import numpy as np
import pytest

from countex.autograd import RngStream
from countex.config import CountexConfig, parse_mask
from countex.errors import CapacityError, ContractError, SceneFormatError
from countex.scenes import (
    CategoryUniverse,
    build_prompt,
    generate_scene,
    read_scene,
    render_density,
    sample_exemplars,
    scene_from_dict,
    scene_to_dict,
    write_scene,
)


def test_universe_descriptors_unit_norm_and_paired(tiny_cfg, tiny_universe):
    for vid in tiny_universe.variant_ids():
        spec = tiny_universe.spec(vid)
        assert abs(np.linalg.norm(spec.base) - 1.0) < 1e-12
        assert abs(np.linalg.norm(spec.attribute) - 1.0) < 1e-12
        sib = tiny_universe.spec(tiny_universe.sibling(vid))
        assert np.array_equal(spec.base, sib.base)
        assert not np.array_equal(spec.attribute, sib.attribute)


def test_attribute_separation_controls_descriptor_distance(tiny_cfg):
    distances = []
    for sep in (0.2, 0.6, 1.0, 1.4):
        cfg = dataclasses.replace(tiny_cfg, attribute_separation=sep)
        uni = CategoryUniverse.from_config(cfg)
        vid = uni.variant_ids()[0]
        a = uni.spec(vid).descriptor()
        b = uni.spec(uni.sibling(vid)).descriptor()
        distances.append(np.linalg.norm(a - b))
    assert all(x < y for x, y in zip(distances, distances[1:]))
    assert np.isclose(distances[2], 1.0, atol=1e-9)


def test_generate_scene_is_deterministic(tiny_cfg, tiny_universe, make_scene):
    a = make_scene(3)
    b = make_scene(3)
    assert scene_to_dict(a) == scene_to_dict(b)


def test_generate_scene_counts_respect_config(tiny_cfg, make_scene):
    for i in range(20):
        scene = make_scene(i)
        assert tiny_cfg.count_min <= scene.positive_count <= tiny_cfg.count_max
        assert tiny_cfg.count_min <= scene.negative_count <= tiny_cfg.count_max
        assert scene.distractor_count <= tiny_cfg.distractor_max
        cells = [inst.center for inst in scene.instances]
        assert len(set(cells)) == len(cells)


def test_degenerate_count_range(tiny_cfg, tiny_universe):
    cfg = dataclasses.replace(tiny_cfg, count_min=5, count_max=5, distractor_max=0)
    scene = generate_scene(cfg, RngStream(0, "dataset/00000"), universe=tiny_universe)
    assert scene.positive_count == 5
    assert scene.negative_count == 5
    assert len(scene.instances) == 10


def test_count_distribution_is_roughly_uniform(tiny_cfg, tiny_universe):
    lo, hi = tiny_cfg.count_min, tiny_cfg.count_max
    k = hi - lo + 1
    counts = np.zeros(k)
    n = 1000
    for i in range(n):
        scene = generate_scene(
            tiny_cfg, RngStream(7, f"dataset/{i:05d}"), universe=tiny_universe
        )
        counts[scene.positive_count - lo] += 1
    expected = n / k
    chi2 = ((counts - expected) ** 2 / expected).sum()
    # 99.9th percentile of chi-square with k-1=6 dof is 22.46
    assert chi2 < 22.46, f"chi2={chi2:.2f}, histogram={counts.tolist()}"


def test_capacity_error_when_grid_too_small(tiny_cfg, tiny_universe):
    cfg = dataclasses.replace(tiny_cfg, grid_h=3, grid_w=3, count_min=9, count_max=9)
    with pytest.raises(CapacityError):
        generate_scene(cfg, RngStream(0, "dataset/00000"), universe=tiny_universe)


def test_density_mass_equals_count(tiny_cfg, make_scene):
    scene = make_scene(4)
    dens = render_density(scene, scene.positive_category, tiny_cfg.density_sigma)
    assert abs(dens.sum() - scene.positive_count) < 1e-6
    with pytest.raises(KeyError):
        render_density(scene, "c99:a", tiny_cfg.density_sigma)


def test_swapped_scene_is_involution_and_shares_instances(make_scene):
    scene = make_scene(5)
    swapped = scene.swapped()
    assert swapped.positive_category == scene.negative_category
    assert swapped.negative_category == scene.positive_category
    assert swapped.instances is scene.instances
    again = swapped.swapped()
    assert scene_to_dict(again) == scene_to_dict(scene)


def test_scene_round_trip_bytes(tmp_path, make_scene):
    scene = make_scene(6)
    path = tmp_path / "scene.json"
    write_scene(scene, path)
    first = path.read_bytes()
    loaded = read_scene(path)
    assert scene_to_dict(loaded) == scene_to_dict(scene)
    write_scene(loaded, path)
    assert path.read_bytes() == first


def test_minimal_hand_written_scene_parses():
    raw = {
        "scene_id": "hand-0",
        "grid": [4, 4],
        "positive_category": "c00:a",
        "negative_category": "c00:b",
        "instances": [
            {"center": [1.0, 1.0], "category": "c00:a", "features": [0.5, 0.25]},
            {"center": [2.0, 3.0], "category": "c00:b", "features": [0.1, 0.9]},
        ],
    }
    scene = scene_from_dict(raw)
    assert len(scene.instances) == 2
    assert scene.positive_count == 1


@pytest.mark.parametrize(
    "mutate, pointer",
    [
        (lambda r: r.pop("positive_category"), "/positive_category"),
        (lambda r: r.update(bogus=1), "/bogus"),
        (lambda r: r.update(grid=[4]), "/grid"),
        (lambda r: r.update(negative_category="c00:a"), "/negative_category"),
        (lambda r: r["instances"][0].update(center=[9.0, 1.0]), "/instances/0/center"),
        (lambda r: r["instances"][0].update(features=[1.0]), "/instances/1/features"),
        (lambda r: r["instances"][1].update(center=[1.0, 1.0]), "/instances/1/center"),
    ],
)
def test_scene_validation_reports_json_pointer(mutate, pointer):
    raw = {
        "scene_id": "hand-0",
        "grid": [4, 4],
        "positive_category": "c00:a",
        "negative_category": "c00:b",
        "instances": [
            {"center": [1.0, 1.0], "category": "c00:a", "features": [0.5, 0.25]},
            {"center": [2.0, 3.0], "category": "c00:b", "features": [0.1, 0.9]},
        ],
    }
    mutate(raw)
    with pytest.raises(SceneFormatError) as err:
        scene_from_dict(raw)
    assert err.value.pointer == pointer


def test_read_scene_wraps_json_errors(tmp_path):
    path = tmp_path / "broken.json"
    path.write_text("{not json")
    with pytest.raises(SceneFormatError):
        read_scene(path)


def test_absent_variant_prefers_unseen_base_and_attribute(tiny_universe, make_scene):
    scene = make_scene(7)
    absent = tiny_universe.absent_variant(scene)
    present_bases = {tiny_universe.spec(i.category).base_id for i in scene.instances}
    spec = tiny_universe.spec(absent)
    assert spec.base_id not in present_bases
    pos_tok = tiny_universe.spec(scene.positive_category).attr_token
    neg_tok = tiny_universe.spec(scene.negative_category).attr_token
    assert spec.attr_token not in (pos_tok, neg_tok)


def test_exemplars_are_scene_features(make_scene):
    scene = make_scene(8)
    gen = RngStream(0, "ex").generator()
    ex = sample_exemplars(scene, scene.positive_category, 3, gen)
    pool = {tuple(i.features) for i in scene.instances if i.category == scene.positive_category}
    assert ex.shape[0] == 3
    for row in ex:
        assert tuple(row) in pool
    with pytest.raises(ContractError):
        sample_exemplars(scene, "c99:a", 3, gen)


def test_build_prompt_respects_mask_and_is_deterministic(make_scene):
    scene = make_scene(9)
    full = parse_mask("t_pos+e_pos+t_neg+e_neg")
    a = build_prompt(scene, full, 0)
    b = build_prompt(scene, full, 0)
    assert np.array_equal(a.positive_exemplars, b.positive_exemplars)
    assert np.array_equal(a.negative_exemplars, b.negative_exemplars)
    assert a.negative_text == scene.negative_category

    pos_only = build_prompt(scene, parse_mask("t_pos"), 0)
    assert not pos_only.has_negative
    assert pos_only.positive_exemplars.shape[0] == 0

    overridden = build_prompt(scene, full, 0, negative_override="c03:a")
    assert overridden.negative_text == "c03:a"
    assert overridden.negative_exemplars.shape[0] == 0
