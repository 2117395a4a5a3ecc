import numpy as np
import pytest

from countex.autograd import RngStream
from countex.config import CountexConfig
from countex.scenes import CategoryUniverse, generate_scene


@pytest.fixture
def tiny_cfg():
    cfg = CountexConfig(
        grid_h=24,
        grid_w=24,
        base_dim=10,
        attr_dim=6,
        noise_sigma=0.1,
        count_min=3,
        count_max=9,
        distractor_max=3,
        attribute_separation=0.9,
        n_categories=5,
        n_attributes=3,
        embed_dim=16,
        n_queries=16,
        heads=4,
        n_prototypes=4,
        steps=5,
        batch_size=2,
    )
    cfg.validate()
    return cfg


@pytest.fixture
def tiny_universe(tiny_cfg):
    return CategoryUniverse.from_config(tiny_cfg)


@pytest.fixture
def make_scene(tiny_cfg, tiny_universe):
    def _make(index=0, cfg=None, universe=None):
        cfg = cfg or tiny_cfg
        universe = universe or tiny_universe
        return generate_scene(
            cfg,
            RngStream(cfg.seed, f"dataset/{index:05d}"),
            universe=universe,
            scene_id=f"scene-{index:05d}",
        )

    return _make


def rand(gen: np.random.Generator, *shape):
    return gen.standard_normal(shape)
